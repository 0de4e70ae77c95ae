use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (state, object) composition, by vocabulary index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub state: usize,
    pub object: usize,
}

impl Pair {
    pub fn new(state: usize, object: usize) -> Self {
        Self { state, object }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum World {
    #[default]
    Closed,
    Open,
}

impl fmt::Display for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            World::Closed => "closed",
            World::Open => "open",
        })
    }
}

impl std::str::FromStr for World {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(Error::Usage(format!("unknown world '{other}' (closed|open)"))),
        }
    }
}

/// State and object vocabularies with disjoint seen and unseen pair sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionSpace {
    states: Vec<String>,
    objects: Vec<String>,
    seen: Vec<Pair>,
    unseen: Vec<Pair>,
    world: World,
}

impl CompositionSpace {
    pub fn new(
        states: Vec<String>,
        objects: Vec<String>,
        seen: impl IntoIterator<Item = Pair>,
        unseen: impl IntoIterator<Item = Pair>,
        world: World,
    ) -> Result<Self> {
        let seen: BTreeSet<Pair> = seen.into_iter().collect();
        let unseen: BTreeSet<Pair> = unseen.into_iter().collect();
        for p in seen.iter().chain(&unseen) {
            if p.state >= states.len() || p.object >= objects.len() {
                return Err(Error::Vocabulary(format!(
                    "pair ({}, {}) outside {} states x {} objects",
                    p.state,
                    p.object,
                    states.len(),
                    objects.len()
                )));
            }
        }
        if let Some(p) = seen.intersection(&unseen).next() {
            return Err(Error::Integrity(format!(
                "pair ({} {}) is both seen and unseen",
                states[p.state], objects[p.object]
            )));
        }
        Ok(Self {
            states,
            objects,
            seen: seen.into_iter().collect(),
            unseen: unseen.into_iter().collect(),
            world,
        })
    }

    /// Space over anonymous vocabularies `s0..`, `o0..`.
    pub fn indexed(
        n_states: usize,
        n_objects: usize,
        seen: impl IntoIterator<Item = Pair>,
        unseen: impl IntoIterator<Item = Pair>,
        world: World,
    ) -> Result<Self> {
        Self::new(
            (0..n_states).map(|i| format!("s{i}")).collect(),
            (0..n_objects).map(|i| format!("o{i}")).collect(),
            seen,
            unseen,
            world,
        )
    }

    pub fn with_world(&self, world: World) -> Self {
        Self { world, ..self.clone() }
    }

    /// Same vocabularies and seen pairs, different unseen set.
    pub fn with_unseen(&self, unseen: impl IntoIterator<Item = Pair>) -> Result<Self> {
        Self::new(
            self.states.clone(),
            self.objects.clone(),
            self.seen.clone(),
            unseen,
            self.world,
        )
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn seen(&self) -> &[Pair] {
        &self.seen
    }

    pub fn unseen(&self) -> &[Pair] {
        &self.unseen
    }

    pub fn world(&self) -> World {
        self.world
    }

    pub fn is_seen(&self, p: Pair) -> bool {
        self.seen.binary_search(&p).is_ok()
    }

    /// Test-time search space: seen then unseen pairs in the closed world,
    /// the full state-major Cartesian product in the open world.
    pub fn candidates(&self) -> CandidateSet {
        let pairs: Vec<Pair> = match self.world {
            World::Closed => self.seen.iter().chain(&self.unseen).copied().collect(),
            World::Open => (0..self.states.len())
                .flat_map(|s| (0..self.objects.len()).map(move |o| Pair::new(s, o)))
                .collect(),
        };
        CandidateSet::new(pairs, self)
    }

    /// Training candidates: the seen pairs only.
    pub fn seen_candidates(&self) -> CandidateSet {
        CandidateSet::new(self.seen.clone(), self)
    }
}

/// Ordered candidate pairs with their seen flags.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub pairs: Vec<Pair>,
    pub seen: Vec<bool>,
}

impl CandidateSet {
    pub fn new(pairs: Vec<Pair>, space: &CompositionSpace) -> Self {
        let seen = pairs.iter().map(|&p| space.is_seen(p)).collect();
        Self { pairs, seen }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_of(&self, p: Pair) -> Option<usize> {
        self.pairs.iter().position(|&q| q == p)
    }

    /// Keeps the candidates whose flag is set, preserving order.
    pub fn retain(&self, keep: &[bool]) -> Self {
        let (pairs, seen) = self
            .pairs
            .iter()
            .zip(&self.seen)
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|((&p, &s), _)| (p, s))
            .unzip();
        Self { pairs, seen }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_world_is_seen_plus_unseen() {
        let space = CompositionSpace::indexed(
            2,
            3,
            [Pair::new(0, 0), Pair::new(1, 1), Pair::new(0, 2)],
            [Pair::new(1, 0)],
            World::Closed,
        )
        .unwrap();
        let c = space.candidates();
        assert_eq!(c.len(), 4);
        assert_eq!(c.seen, vec![true, true, true, false]);
        assert_eq!(space.with_world(World::Open).candidates().len(), 6);
    }

    #[test]
    fn overlapping_seen_and_unseen_is_an_integrity_error() {
        let r = CompositionSpace::indexed(2, 2, [Pair::new(0, 0)], [Pair::new(0, 0)], World::Closed);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn out_of_vocabulary_pair_is_rejected() {
        let r = CompositionSpace::indexed(2, 2, [Pair::new(2, 0)], [], World::Closed);
        assert!(matches!(r, Err(Error::Vocabulary(_))));
    }
}
