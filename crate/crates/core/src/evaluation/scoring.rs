use super::space::CandidateSet;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Mixes the composition branch with the product of the primitive branches:
/// `beta * p(c) + (1 - beta) * p(s) * p(o)` for every candidate pair.
pub fn combined_scores(
    p_com: &Tensor,
    p_state: &Tensor,
    p_obj: &Tensor,
    beta: f64,
    candidates: &CandidateSet,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    let n = p_com.rows();
    if p_com.last_dim() != candidates.len() {
        return Err(Error::Integrity(format!(
            "{} composition columns for {} candidates",
            p_com.last_dim(),
            candidates.len()
        )));
    }
    if p_state.rows() != n || p_obj.rows() != n {
        return Err(Error::Integrity("branch probabilities disagree on item count".into()));
    }
    let (ns, no) = (p_state.last_dim(), p_obj.last_dim());
    if let Some(p) = candidates.pairs.iter().find(|p| p.state >= ns || p.object >= no) {
        return Err(Error::Integrity(format!(
            "candidate ({}, {}) has no primitive column ({ns} states, {no} objects)",
            p.state, p.object
        )));
    }
    let width = candidates.len();
    Ok(Tensor::from_fn(&[n, width], |i| {
        let (r, c) = (i / width, i % width);
        let pair = candidates.pairs[c];
        beta * p_com.row(r)[c]
            + (1.0 - beta) * p_state.row(r)[pair.state] * p_obj.row(r)[pair.object]
    }))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row(r))).collect()
}

/// Row-wise softmax over the selected columns of `logits`.
pub fn softmax_columns(logits: &Tensor, columns: &[usize]) -> Tensor {
    let w = columns.len();
    let mut out = Vec::with_capacity(logits.rows() * w);
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut sel: Vec<f64> = columns.iter().map(|&c| row[c]).collect();
        crate::numeric::tape::softmax_in_place(&mut sel);
        out.extend(sel);
    }
    Tensor::new(vec![logits.rows(), w], out).expect("non-empty selection")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{CompositionSpace, Pair, World};
    use crate::numeric::rng::seeded;
    use rand::Rng;

    fn random_probs(rng: &mut impl Rng, n: usize, k: usize) -> Tensor {
        let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-3.0..3.0));
        softmax_columns(&logits, &(0..k).collect::<Vec<_>>())
    }

    #[test]
    fn beta_selects_a_branch() {
        let space = CompositionSpace::indexed(3, 4, [Pair::new(0, 0), Pair::new(1, 1), Pair::new(2, 3)], [Pair::new(0, 2), Pair::new(2, 1)], World::Closed).unwrap();
        let cands = space.candidates();
        let mut rng = seeded(1, 0);
        let pc = random_probs(&mut rng, 50, cands.len());
        let ps = random_probs(&mut rng, 50, 3);
        let po = random_probs(&mut rng, 50, 4);
        let one = combined_scores(&pc, &ps, &po, 1.0, &cands).unwrap();
        assert_eq!(predictions(&one), predictions(&pc));
        let zero = combined_scores(&pc, &ps, &po, 0.0, &cands).unwrap();
        for r in 0..50 {
            let prod: Vec<f64> = cands.pairs.iter().map(|p| ps.row(r)[p.state] * po.row(r)[p.object]).collect();
            assert_eq!(predictions(&zero)[r], argmax(&prod));
        }
        assert!(matches!(combined_scores(&pc, &ps, &po, 1.5, &cands), Err(Error::Parameter(_))));
        let narrow = random_probs(&mut rng, 50, 2);
        assert!(matches!(combined_scores(&pc, &narrow, &po, 0.5, &cands), Err(Error::Integrity(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9, 0.1]), 1);
        assert_eq!(argmax(&[0.2, 0.2]), 0);
    }
}
