//! Candidate spaces, the mixed inference rule, open-world pruning and the
//! seen/unseen calibration sweep.

mod feasibility;
mod scoring;
mod space;
mod sweep;

use std::io::Write;

pub use feasibility::{feasibility_filter, feasibility_scores, FeasibilityScores, FilterOutcome};
pub use scoring::{argmax, combined_scores, predictions, softmax_columns};
pub use space::{CandidateSet, CompositionSpace, Pair, World};
pub use sweep::{
    accuracy_at_zero_bias, bias_sweep, harmonic_mean, summarize, sweep_biases, trapezoid_auc,
    CurvePoint, CurveSummary, EvalCurve, Truth,
};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Temperature-scaled logits of the three branches for a set of items. The
/// composition columns follow `candidates`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchLogits {
    pub candidates: CandidateSet,
    pub com: Tensor,
    pub state: Tensor,
    pub obj: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub curve: EvalCurve,
    pub active_candidates: usize,
    /// Seen/unseen pair accuracy without calibration bias.
    pub seen_acc_at_zero: f64,
    pub unseen_acc_at_zero: f64,
    pub state_acc: f64,
    pub object_acc: f64,
    pub warning: Option<String>,
}

fn branch_accuracy(logits: &Tensor, truth: impl Iterator<Item = usize>) -> f64 {
    let n = logits.rows();
    let hits = truth
        .enumerate()
        .filter(|&(i, t)| argmax(logits.row(i)) == t)
        .count();
    hits as f64 / n.max(1) as f64
}

/// Scores the items against the `active` candidates (a subset of
/// `logits.candidates`) with the mixing weight `beta` and sweeps the bias.
pub fn evaluate_logits(
    logits: &BranchLogits,
    active: &CandidateSet,
    truth: &[Pair],
    space: &CompositionSpace,
    beta: f64,
) -> Result<EvalReport> {
    if truth.len() != logits.com.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} scored items",
            truth.len(),
            logits.com.rows()
        )));
    }
    let columns = active
        .pairs
        .iter()
        .map(|&p| {
            logits.candidates.index_of(p).ok_or_else(|| {
                Error::Integrity(format!("active pair ({}, {}) was not scored", p.state, p.object))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p_com = softmax_columns(&logits.com, &columns);
    let all_states: Vec<usize> = (0..logits.state.last_dim()).collect();
    let all_objects: Vec<usize> = (0..logits.obj.last_dim()).collect();
    let p_state = softmax_columns(&logits.state, &all_states);
    let p_obj = softmax_columns(&logits.obj, &all_objects);
    let scores = combined_scores(&p_com, &p_state, &p_obj, beta, active)?;
    let targets: Vec<Truth> = truth
        .iter()
        .map(|&p| Truth { column: active.index_of(p), seen: space.is_seen(p) })
        .collect();
    let curve = bias_sweep(&scores, &targets, &active.seen)?;
    let (seen0, unseen0) = accuracy_at_zero_bias(&scores, &targets);
    Ok(EvalReport {
        curve,
        active_candidates: active.len(),
        seen_acc_at_zero: seen0,
        unseen_acc_at_zero: unseen0,
        state_acc: branch_accuracy(&logits.state, truth.iter().map(|p| p.state)),
        object_acc: branch_accuracy(&logits.obj, truth.iter().map(|p| p.object)),
        warning: None,
    })
}

/// Threshold candidates for open-world pruning: no pruning plus every
/// distinct unseen score, thinned to at most `max_candidates` quantiles.
pub fn threshold_grid(
    scores: &FeasibilityScores,
    space: &CompositionSpace,
    max_candidates: usize,
) -> Vec<f64> {
    let mut vals: Vec<f64> = scores
        .pairs
        .iter()
        .zip(&scores.scores)
        .filter(|(p, _)| !space.is_seen(**p))
        .map(|(_, &s)| s)
        .collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals.dedup();
    let mut grid = vec![f64::NEG_INFINITY];
    if vals.len() <= max_candidates {
        grid.extend(vals);
    } else {
        let last = vals.len() - 1;
        let mut picked: Vec<f64> = (0..max_candidates)
            .map(|i| vals[i * last / (max_candidates - 1).max(1)])
            .collect();
        picked.dedup();
        grid.extend(picked);
    }
    grid
}

/// Picks the pruning threshold with the best validation AUC; ties keep the
/// lower threshold.
pub fn choose_threshold(
    logits: &BranchLogits,
    truth: &[Pair],
    space: &CompositionSpace,
    scores: &FeasibilityScores,
    beta: f64,
    max_candidates: usize,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for theta in threshold_grid(scores, space, max_candidates) {
        let active = feasibility_filter(space, scores, theta).candidates;
        let auc = evaluate_logits(logits, &active, truth, space, beta)?.curve.summary.auc;
        if best.is_none_or(|(_, a)| auc > a) {
            best = Some((theta, auc));
        }
    }
    Ok(best.expect("grid always holds the no-pruning threshold"))
}

pub fn write_curve_csv(mut w: impl Write, curve: &EvalCurve) -> Result<()> {
    writeln!(w, "bias,seen_acc,unseen_acc")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.bias, p.seen_acc, p.unseen_acc)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub world: World,
    pub seed: u64,
    pub summary: CurveSummary,
}

pub const SUMMARY_HEADER: &str = "dataset,world,seed,S,U,HM,AUC";

pub fn write_summary_csv(mut w: impl Write, rows: &[SummaryRow]) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        let s = r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.dataset, r.world, r.seed, s.seen, s.unseen, s.hm, s.auc
        )?;
    }
    Ok(())
}

/// Parses rows written by [`write_summary_csv`]; floats round-trip exactly.
pub fn read_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SUMMARY_HEADER => {}
        other => {
            return Err(Error::Usage(format!(
                "summary header {:?}, expected {SUMMARY_HEADER}",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Usage(format!("summary row '{line}' has {} fields", f.len())));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Usage(format!("bad number '{s}' in '{line}'")))
            };
            Ok(SummaryRow {
                dataset: f[0].to_string(),
                world: f[1].parse()?,
                seed: f[2]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad seed in '{line}'")))?,
                summary: CurveSummary {
                    seen: num(f[3])?,
                    unseen: num(f[4])?,
                    hm: num(f[5])?,
                    auc: num(f[6])?,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
