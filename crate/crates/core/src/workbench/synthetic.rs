use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{CompositionSpace, Pair, World};
use crate::numeric::rng::{normal, seeded};
use crate::numeric::Tensor;
use crate::training::Split;

/// Desk-scale compositional task: object prototypes over all coordinates,
/// plus a state pattern over a contiguous window at a state-specific position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_states: usize,
    pub n_objects: usize,
    pub feature_dim: usize,
    pub samples_per_pair: usize,
    /// Fraction of all pairs held out as unseen.
    pub unseen_ratio: f64,
    /// Fraction of coordinates a state perturbs.
    pub locality: f64,
    pub noise: f64,
    /// Magnitude of state patterns relative to unit-variance prototypes.
    pub state_scale: f64,
    /// Share of each seen pair's samples used for training, then validation;
    /// the rest are test samples.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_objects: 10,
            feature_dim: 64,
            samples_per_pair: 50,
            unseen_ratio: 0.25,
            locality: 0.15,
            noise: 0.5,
            state_scale: 2.0,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// Closed-world space: seen pairs and the held-out unseen pairs.
    pub space: CompositionSpace,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl SyntheticTaskSpec {
    pub fn window(&self) -> usize {
        ((self.locality * self.feature_dim as f64).round() as usize).clamp(1, self.feature_dim)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.n_states == 0 || self.n_objects == 0 || self.feature_dim == 0 || self.samples_per_pair == 0 {
            return bad("states, objects, feature_dim and samples_per_pair must be positive".into());
        }
        if !(self.locality > 0.0 && self.locality <= 1.0) {
            return bad(format!("locality {} not in (0, 1]", self.locality));
        }
        if !(0.0..1.0).contains(&self.unseen_ratio) {
            return bad(format!("unseen_ratio {} not in [0, 1)", self.unseen_ratio));
        }
        if self.noise < 0.0 || self.train_fraction <= 0.0 || self.val_fraction < 0.0 || self.train_fraction + self.val_fraction > 1.0 {
            return bad("noise must be >= 0 and train/val fractions must partition [0, 1]".into());
        }
        Ok(())
    }
}

/// Picks `count` unseen pairs so every state and object keeps a seen pair.
fn choose_unseen(spec: &SyntheticTaskSpec, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    let (ns, no) = (spec.n_states, spec.n_objects);
    let count = (spec.unseen_ratio * (ns * no) as f64).round() as usize;
    let mut all: Vec<Pair> = (0..ns).flat_map(|s| (0..no).map(move |o| Pair::new(s, o))).collect();
    all.shuffle(rng);
    let mut state_seen = vec![no; ns];
    let mut object_seen = vec![ns; no];
    let mut unseen = Vec::with_capacity(count);
    for p in all {
        if unseen.len() == count {
            break;
        }
        if state_seen[p.state] > 1 && object_seen[p.object] > 1 {
            state_seen[p.state] -= 1;
            object_seen[p.object] -= 1;
            unseen.push(p);
        }
    }
    if unseen.len() < count {
        return Err(Error::Generation(format!(
            "cannot hold out {count} of {} pairs while every primitive keeps a seen pair",
            ns * no
        )));
    }
    unseen.sort();
    Ok(unseen)
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, 0);
    let unseen = choose_unseen(spec, &mut rng)?;
    let seen: Vec<Pair> = (0..spec.n_states)
        .flat_map(|s| (0..spec.n_objects).map(move |o| Pair::new(s, o)))
        .filter(|p| unseen.binary_search(p).is_err())
        .collect();
    let space = CompositionSpace::indexed(spec.n_states, spec.n_objects, seen.clone(), unseen.clone(), World::Closed)?;

    let d = spec.feature_dim;
    let k = spec.window();
    let protos = normal(&mut rng, &[spec.n_objects, d], 1.0);
    let patterns = normal(&mut rng, &[spec.n_states, k], spec.state_scale);
    let starts: Vec<usize> = (0..spec.n_states).map(|_| rng.random_range(0..=d - k)).collect();

    let mut parts: [(Vec<f64>, Vec<Pair>); 3] = Default::default();
    let n = spec.samples_per_pair;
    let n_train = ((spec.train_fraction * n as f64).round() as usize).min(n);
    let n_val = ((spec.val_fraction * n as f64).round() as usize).min(n - n_train);
    let sample = |p: Pair, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let mut x = protos.row(p.object).to_vec();
        let start = starts[p.state];
        for (j, v) in patterns.row(p.state).iter().enumerate() {
            x[start + j] += v;
        }
        if spec.noise > 0.0 {
            let e = normal(rng, &[d], spec.noise);
            x.iter_mut().zip(e.data()).for_each(|(a, b)| *a += b);
        }
        x
    };
    for p in space.seen().iter().chain(space.unseen()) {
        let is_seen = space.is_seen(*p);
        for i in 0..n {
            let split = if is_seen {
                if i < n_train {
                    0
                } else if i < n_train + n_val {
                    1
                } else {
                    2
                }
            } else if i < n / 2 {
                1
            } else {
                2
            };
            let x = sample(*p, &mut rng);
            parts[split].0.extend(x);
            parts[split].1.push(*p);
        }
    }
    let [train, val, test] = parts.map(|(data, labels)| {
        if labels.is_empty() {
            Ok(Split { x: Tensor::zeros(&[1, d]), labels, layers: None })
        } else {
            Split::new(Tensor::new(vec![labels.len(), d], data)?, labels)
        }
    });
    Ok(Dataset {
        name: "synthetic".into(),
        space,
        train: train?,
        val: val?,
        test: test?,
    })
}
