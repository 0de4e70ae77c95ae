use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Ground truth for one evaluated item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Truth {
    /// Column of the true pair among the candidates, if it is a candidate.
    pub column: Option<usize>,
    /// Whether the true pair is a seen pair.
    pub seen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CurveSummary {
    /// Best seen accuracy.
    pub seen: f64,
    /// Best unseen accuracy.
    pub unseen: f64,
    /// Best harmonic mean along the curve.
    pub hm: f64,
    /// Area under the seen/unseen accuracy curve, in [0, 1].
    pub auc: f64,
}

/// Seen/unseen accuracy traced as the calibration bias on unseen columns
/// sweeps from very negative to very positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub summary: CurveSummary,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn trapezoid_auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].unseen_acc - w[0].unseen_acc) * (w[0].seen_acc + w[1].seen_acc) / 2.0)
        .sum()
}

/// Bias values strictly between (and beyond) the sorted distinct critical
/// thresholds, so no swept bias produces a tie.
pub fn sweep_biases(thresholds: &mut Vec<f64>) -> Vec<f64> {
    thresholds.retain(|g| g.is_finite());
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();
    let Some((&lo, &hi)) = thresholds.first().zip(thresholds.last()) else {
        return vec![0.0];
    };
    let mut biases = Vec::with_capacity(thresholds.len() + 1);
    biases.push(lo - (1.0 + lo.abs()));
    biases.extend(thresholds.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    biases.push(hi + (1.0 + hi.abs()));
    biases
}

struct ItemGap {
    /// Bias above which the item switches from its best seen to its best
    /// unseen candidate.
    gap: f64,
    seen_top_correct: bool,
    unseen_top_correct: bool,
}

fn best_in(row: &[f64], mask: &[bool], want_seen: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (c, (&v, &s)) in row.iter().zip(mask).enumerate() {
        if s == want_seen && best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best
}

/// Exact seen/unseen sweep over every critical bias.
///
/// At bias `b`, each item predicts the argmax of its scores with `b` added to
/// every unseen column. That prediction is either the item's best seen or best
/// unseen candidate, switching at the item's gap; the curve is evaluated once
/// in every interval between distinct gaps.
pub fn bias_sweep(scores: &Tensor, truth: &[Truth], seen_mask: &[bool]) -> Result<EvalCurve> {
    if scores.rows() != truth.len() || scores.last_dim() != seen_mask.len() {
        return Err(Error::Dimension(format!(
            "scores {:?} vs {} items and {} candidates",
            scores.shape(),
            truth.len(),
            seen_mask.len()
        )));
    }
    let n_seen = truth.iter().filter(|t| t.seen).count();
    let n_unseen = truth.len() - n_seen;
    if n_seen == 0 {
        return Err(Error::UndefinedMetric("no seen-pair items to score".into()));
    }
    if n_unseen == 0 {
        return Err(Error::UndefinedMetric("no unseen-pair items to score".into()));
    }
    let items: Vec<ItemGap> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let row = scores.row(i);
            let s = best_in(row, seen_mask, true);
            let u = best_in(row, seen_mask, false);
            let gap = match (s, u) {
                (Some((_, sv)), Some((_, uv))) => sv - uv,
                (Some(_), None) => f64::INFINITY,
                _ => f64::NEG_INFINITY,
            };
            ItemGap {
                gap,
                seen_top_correct: t.seen && s.is_some() && t.column == s.map(|x| x.0),
                unseen_top_correct: !t.seen && u.is_some() && t.column == u.map(|x| x.0),
            }
        })
        .collect();

    // Seen items stay correct while bias < gap; unseen ones once bias > gap.
    let mut seen_gaps: Vec<f64> = items.iter().filter(|g| g.seen_top_correct).map(|g| g.gap).collect();
    let mut unseen_gaps: Vec<f64> = items.iter().filter(|g| g.unseen_top_correct).map(|g| g.gap).collect();
    seen_gaps.sort_by(|a, b| a.total_cmp(b));
    unseen_gaps.sort_by(|a, b| a.total_cmp(b));

    let mut thresholds: Vec<f64> = items.iter().map(|g| g.gap).collect();
    let biases = sweep_biases(&mut thresholds);
    let points: Vec<CurvePoint> = biases
        .into_iter()
        .map(|b| {
            let seen_ok = seen_gaps.len() - seen_gaps.partition_point(|&g| g <= b);
            let unseen_ok = unseen_gaps.partition_point(|&g| g < b);
            CurvePoint {
                bias: b,
                seen_acc: seen_ok as f64 / n_seen as f64,
                unseen_acc: unseen_ok as f64 / n_unseen as f64,
            }
        })
        .collect();
    let summary = summarize(&points);
    Ok(EvalCurve { points, summary })
}

pub fn summarize(points: &[CurvePoint]) -> CurveSummary {
    CurveSummary {
        seen: points.iter().map(|p| p.seen_acc).fold(0.0, f64::max),
        unseen: points.iter().map(|p| p.unseen_acc).fold(0.0, f64::max),
        hm: points
            .iter()
            .map(|p| harmonic_mean(p.seen_acc, p.unseen_acc))
            .fold(0.0, f64::max),
        auc: trapezoid_auc(points),
    }
}

/// Seen and unseen accuracy of plain argmax (bias 0) predictions.
pub fn accuracy_at_zero_bias(scores: &Tensor, truth: &[Truth]) -> (f64, f64) {
    let (mut s_ok, mut s_n, mut u_ok, mut u_n) = (0usize, 0usize, 0usize, 0usize);
    for (i, t) in truth.iter().enumerate() {
        let hit = t.column == Some(super::scoring::argmax(scores.row(i)));
        if t.seen {
            s_n += 1;
            s_ok += hit as usize;
        } else {
            u_n += 1;
            u_ok += hit as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(s_ok, s_n), ratio(u_ok, u_n))
}
