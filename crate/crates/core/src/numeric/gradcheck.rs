use rand::seq::index::sample;

use super::params::{ParamId, ParamStore};
use super::rng::seeded;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Leaves with more coordinates than this are subsampled to this many.
    pub max_coords_per_leaf: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Multiple of the central-difference roundoff `|f| eps / step` below
    /// which a discrepancy is not resolvable; raises the floor to
    /// `roundoff / tolerance`. Zero disables.
    pub roundoff_factor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_leaf: 200,
            floor: 1e-6,
            roundoff_factor: 8.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMismatch {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_leaf: Option<String>,
    pub failures: Vec<CoordinateMismatch>,
    pub tolerance: f64,
    /// Denominator floor actually applied.
    pub floor_used: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, for every coordinate of every leaf in `leaves`.
///
/// `f` must be deterministic; it is always handed an evaluation-mode tape.
pub fn grad_check<F>(
    store: &mut ParamStore,
    leaves: &[ParamId],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Parameter(format!("step must be > 0, got {}", opts.step)));
    }
    let saved_grads: Vec<_> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grads();
    let mut tape = Tape::eval();
    let out = f(&mut tape, store)?;
    let f0 = tape.scalar(out);
    let roundoff = opts.roundoff_factor * f0.abs() * f64::EPSILON / opts.step;
    let floor = opts.floor.max(roundoff / opts.tolerance);
    tape.backward(out)?;
    tape.accumulate_into(store);
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&id| {
            let p = store.get(id);
            p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();

    let mut eval_at = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::eval();
        let out = f(&mut t, store)?;
        let v = t.scalar(out);
        if !v.is_finite() {
            return Err(Error::Evaluation("non-finite value at perturbed point".into()));
        }
        Ok(v)
    };

    let mut rng = seeded(opts.seed, 0x6772_6164);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_leaf: None,
        failures: Vec::new(),
        tolerance: opts.tolerance,
        floor_used: floor,
    };
    for (li, &id) in leaves.iter().enumerate() {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = if n > opts.max_coords_per_leaf {
            let mut c = sample(&mut rng, n, opts.max_coords_per_leaf).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval_at(store);
            store.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval_at(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic[li][i];
            let rel = relative_error(a, numeric, floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_leaf = Some(store.get(id).name.clone());
            }
            if rel > opts.tolerance {
                report.failures.push(CoordinateMismatch {
                    leaf: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(saved_grads) {
        store.get_mut(id).grad = g;
    }
    Ok(report)
}
