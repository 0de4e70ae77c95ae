//! Temperature-scaled branch probabilities and the weighted three-branch
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numeric::{Tape, Var};

/// Probabilities below this are clamped before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_s: f64,
    pub alpha_o: f64,
    pub alpha_c: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha_s: 1.0, alpha_o: 1.0, alpha_c: 1.0, temperature: 0.01 }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha_s: self.alpha_s, alpha_o: self.alpha_o, alpha_c: self.alpha_c }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("loss.temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_o: f64,
    pub alpha_c: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha_s, self.alpha_o, self.alpha_c];
        if w.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || w.iter().all(|&a| a == 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be nonnegative with one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {tau}")))
    }
}

/// Dot products divided by the temperature.
pub fn scaled_logits(tape: &mut Tape, dots: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    Ok(tape.scale(dots, 1.0 / tau))
}

/// Cosine logits `<v, t> / tau` of `v [b, d]` against shared candidates
/// `t [N, d]` or per-item candidates `t [b, N, d]`, giving `[b, N]`.
pub fn branch_logits(tape: &mut Tape, v: Var, t: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let vn = tape.l2_normalize(v);
    let tn = tape.l2_normalize(t);
    let dots = match tape.shape(t).len() {
        2 => tape.matmul_nt(vn, tn)?,
        3 => tape.row_dot(vn, tn)?,
        _ => return dim_err(format!("candidate embeddings must be rank 2 or 3, got {:?}", tape.shape(t))),
    };
    scaled_logits(tape, dots, tau)
}

/// Row-stochastic `softmax(<v, t> / tau)` over the candidates.
pub fn branch_probs(tape: &mut Tape, v: Var, t: Var, tau: f64) -> Result<Var> {
    let logits = branch_logits(tape, v, t, tau)?;
    tape.softmax(logits, 1)
}

#[derive(Clone, Copy, Debug)]
pub struct BranchLoss {
    pub loss: Var,
    /// Items whose true-class probability hit the floor.
    pub floored: usize,
}

/// Mean negative log probability of the true class.
pub fn branch_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<BranchLoss> {
    let loss = tape.cross_entropy_from_probs(probs, labels, PROB_FLOOR)?;
    let p = tape.value(probs);
    let floored = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| p.row(i)[l] < PROB_FLOOR)
        .count();
    Ok(BranchLoss { loss, floored })
}

/// `alpha_s L_s + alpha_o L_o + alpha_c L_c`.
pub fn total_loss(tape: &mut Tape, l_s: Var, l_o: Var, l_c: Var, w: LossWeights) -> Result<Var> {
    let a = tape.scale(l_s, w.alpha_s);
    let b = tape.scale(l_o, w.alpha_o);
    let c = tape.scale(l_c, w.alpha_c);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
