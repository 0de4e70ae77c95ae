use super::space::{CandidateSet, CompositionSpace, Pair, World};
use crate::error::{dim_err, Result};
use crate::numeric::Tensor;

/// Plausibility of every pair in the open-world product, from primitive
/// token similarity to seen pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityScores {
    pub pairs: Vec<Pair>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub candidates: CandidateSet,
    pub warning: Option<String>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Score of `(s, o)`: the mean of the best object-side similarity
/// `max cos(obj[o], obj[o'])` over seen `(s, o')` and the best state-side
/// similarity `max cos(state[s], state[s'])` over seen `(s', o)`. A side with
/// no seen partner contributes -1.
pub fn feasibility_scores(
    space: &CompositionSpace,
    state_tokens: &Tensor,
    object_tokens: &Tensor,
) -> Result<FeasibilityScores> {
    let (ns, no) = (space.states().len(), space.objects().len());
    if state_tokens.rows() != ns || object_tokens.rows() != no {
        return dim_err(format!(
            "token tables {:?} and {:?} for {ns} states and {no} objects",
            state_tokens.shape(),
            object_tokens.shape()
        ));
    }
    let mut objects_of = vec![Vec::new(); ns];
    let mut states_of = vec![Vec::new(); no];
    for p in space.seen() {
        objects_of[p.state].push(p.object);
        states_of[p.object].push(p.state);
    }
    let best = |others: &[usize], me: usize, table: &Tensor| {
        others
            .iter()
            .filter(|&&x| x != me)
            .map(|&x| cosine(table.row(me), table.row(x)))
            .fold(-1.0, f64::max)
    };
    let mut pairs = Vec::with_capacity(ns * no);
    let mut scores = Vec::with_capacity(ns * no);
    for s in 0..ns {
        for o in 0..no {
            let obj_side = best(&objects_of[s], o, object_tokens);
            let state_side = best(&states_of[o], s, state_tokens);
            pairs.push(Pair::new(s, o));
            scores.push(0.5 * (obj_side + state_side));
        }
    }
    Ok(FeasibilityScores { pairs, scores })
}

impl FeasibilityScores {
    pub fn score_of(&self, p: Pair) -> Option<f64> {
        self.pairs.iter().position(|&q| q == p).map(|i| self.scores[i])
    }

    /// Observed range over non-seen pairs.
    pub fn unseen_range(&self, space: &CompositionSpace) -> Option<(f64, f64)> {
        self.pairs
            .iter()
            .zip(&self.scores)
            .filter(|(p, _)| !space.is_seen(**p))
            .map(|(_, &s)| s)
            .fold(None, |acc, s| match acc {
                None => Some((s, s)),
                Some((lo, hi)) => Some((f64::min(lo, s), f64::max(hi, s))),
            })
    }
}

/// Prunes the open-world candidates: seen pairs always stay, others stay iff
/// their score is at least `theta`. The closed world is returned untouched.
pub fn feasibility_filter(
    space: &CompositionSpace,
    scores: &FeasibilityScores,
    theta: f64,
) -> FilterOutcome {
    let all = space.candidates();
    if space.world() == World::Closed {
        return FilterOutcome { candidates: all, warning: None };
    }
    let warning = match scores.unseen_range(space) {
        Some((lo, hi)) if theta.is_finite() && (theta < lo || theta > hi) => Some(format!(
            "threshold {theta} lies outside observed feasibility scores [{lo}, {hi}]"
        )),
        _ => None,
    };
    let keep: Vec<bool> = all
        .pairs
        .iter()
        .zip(&all.seen)
        .map(|(&p, &seen)| seen || scores.score_of(p).is_some_and(|s| s >= theta))
        .collect();
    FilterOutcome { candidates: all.retain(&keep), warning }
}
