//! Fusion of the first-N and last-M encoder layers into `F_low` and `F_high`.

use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureStack;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    FirstN(usize),
    LastM(usize),
}

impl Window {
    pub fn size(self) -> usize {
        match self {
            Window::FirstN(k) | Window::LastM(k) => k,
        }
    }

    /// 1-based layer indices covered in a stack of `depth` layers.
    pub fn layers(self, depth: usize) -> Result<RangeInclusive<usize>> {
        let k = self.size();
        if k == 0 || k > depth {
            return Err(Error::Config(format!(
                "window of {k} layers does not fit an encoder of depth {depth}"
            )));
        }
        Ok(match self {
            Window::FirstN(n) => 1..=n,
            Window::LastM(m) => depth - m + 1..=depth,
        })
    }
}

/// Concatenates the window's layers along the feature axis, in order.
pub fn concat_window(tape: &mut Tape, stack: &FeatureStack, window: Window) -> Result<Var> {
    let parts: Vec<Var> = window.layers(stack.depth())?.map(|i| stack.layer(i)).collect();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_last(&parts)
}

/// Elementwise mean of the window's layers.
pub fn mean_window(tape: &mut Tape, stack: &FeatureStack, window: Window) -> Result<Var> {
    let layers = window.layers(stack.depth())?;
    let k = window.size();
    let mut acc: Option<Var> = None;
    for i in layers {
        let l = stack.layer(i);
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let acc = acc.expect("non-empty window");
    Ok(if k == 1 { acc } else { tape.scale(acc, 1.0 / k as f64) })
}

/// Linear map `[.., K d] -> [.., d]`, layer normalization with learnable
/// gain/offset, ReLU, dropout.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub window: Window,
    pub linear: Linear,
    pub gain: ParamId,
    pub offset: ParamId,
    pub dropout: f64,
}

impl Aggregator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        window: Window,
        width: usize,
        dropout: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Parameter(format!("aggregator dropout must lie in [0, 1), got {dropout}")));
        }
        let k = window.size();
        if k == 0 {
            return Err(Error::Config("aggregation window must hold at least one layer".into()));
        }
        let linear = Linear::new(store, rng, &format!("{name}.proj"), k * width, width, true, true, Init::Uniform);
        let gain = store.add(format!("{name}.ln.gain"), Tensor::full(&[width], 1.0), true);
        let offset = store.add(format!("{name}.ln.offset"), Tensor::zeros(&[width]), true);
        Ok(Self { window, linear, gain, offset, dropout })
    }

    /// Applies the aggregator to an already concatenated `[b, l, K d]` input.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, concat: Var) -> Result<Var> {
        let h = self.linear.forward(tape, store, concat)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.offset);
        let h = tape.layer_norm(h, Some(g), Some(b), LN_EPS)?;
        let h = tape.relu(h);
        tape.dropout(h, self.dropout)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stack: &FeatureStack) -> Result<Var> {
        let x = concat_window(tape, stack, self.window)?;
        self.aggregate(tape, store, x)
    }
}

/// How the low/high visual features are formed from the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Learned aggregators over the first-N / last-M windows.
    #[default]
    Learned,
    /// Raw first and last layer.
    FirstLast,
    /// Layerwise mean over each window.
    WindowMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub n_low: usize,
    pub m_high: usize,
    pub dropout: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { n_low: 3, m_high: 3, dropout: 0.1 }
    }
}

impl AggregationConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.n_low == 0 || self.m_high == 0 {
            return Err(Error::Config("aggregation.n_low and aggregation.m_high must be >= 1".into()));
        }
        if self.n_low + self.m_high > depth {
            return Err(Error::Config(format!(
                "aggregation windows {} + {} exceed encoder depth {depth}",
                self.n_low, self.m_high
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("aggregation.dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Produces `(F_low, F_high)` from a feature stack.
#[derive(Clone, Debug)]
pub struct VisualAggregation {
    pub mode: AggregationMode,
    pub low: Window,
    pub high: Window,
    pub learned: Option<(Aggregator, Aggregator)>,
}

impl VisualAggregation {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &AggregationConfig,
        depth: usize,
        width: usize,
        mode: AggregationMode,
    ) -> Result<Self> {
        cfg.validate(depth)?;
        let (low, high) = match mode {
            AggregationMode::FirstLast => (Window::FirstN(1), Window::LastM(1)),
            _ => (Window::FirstN(cfg.n_low), Window::LastM(cfg.m_high)),
        };
        let learned = match mode {
            AggregationMode::Learned => Some((
                Aggregator::new(store, rng, "agg_low", low, width, cfg.dropout)?,
                Aggregator::new(store, rng, "agg_high", high, width, cfg.dropout)?,
            )),
            _ => None,
        };
        Ok(Self { mode, low, high, learned })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stack: &FeatureStack) -> Result<(Var, Var)> {
        match (&self.learned, self.mode) {
            (Some((lo, hi)), _) => Ok((lo.forward(tape, store, stack)?, hi.forward(tape, store, stack)?)),
            (None, AggregationMode::WindowMean) => Ok((
                mean_window(tape, stack, self.low)?,
                mean_window(tape, stack, self.high)?,
            )),
            (None, _) => Ok((
                concat_window(tape, stack, self.low)?,
                concat_window(tape, stack, self.high)?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    use super::*;
    use crate::numeric::rng::seeded;
    use crate::numeric::{grad_check, GradCheckOptions};

    fn random_stack(tape: &mut Tape, rng: &mut impl Rng, depth: usize, b: usize, l: usize, d: usize) -> FeatureStack {
        let layers: Vec<Tensor> = (0..depth)
            .map(|_| Tensor::from_fn(&[b, l, d], |_| rng.random_range(-1.0..1.0)))
            .collect();
        FeatureStack::from_values(tape, &layers, 0)
    }

    /// Per-position linear, normalization, affine and ReLU with plain loops.
    fn oracle(x: &Tensor, w: &Tensor, bias: &Tensor, gain: &Tensor, offset: &Tensor) -> Vec<f64> {
        let (d, kd) = (w.shape()[0], w.shape()[1]);
        let mut out = Vec::new();
        for r in 0..x.numel() / kd {
            let xr = &x.data()[r * kd..(r + 1) * kd];
            let mut h = vec![0.0; d];
            for i in 0..d {
                let mut acc = bias.data()[i];
                for j in 0..kd {
                    acc += w.data()[i * kd + j] * xr[j];
                }
                h[i] = acc;
            }
            let mean = h.iter().sum::<f64>() / d as f64;
            let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for i in 0..d {
                let y = (h[i] - mean) / (var + LN_EPS).sqrt() * gain.data()[i] + offset.data()[i];
                out.push(y.max(0.0));
            }
        }
        out
    }

    #[test]
    fn windows_select_expected_layers() {
        assert_eq!(Window::FirstN(1).layers(8).unwrap(), 1..=1);
        assert_eq!(Window::LastM(3).layers(8).unwrap(), 6..=8);
        assert!(matches!(Window::FirstN(9).layers(8), Err(Error::Config(_))));
        let mut rng = seeded(0, 0);
        let mut tape = Tape::eval();
        let stack = random_stack(&mut tape, &mut rng, 8, 2, 3, 4);
        let one = concat_window(&mut tape, &stack, Window::FirstN(1)).unwrap();
        assert_eq!(tape.value(one), tape.value(stack.layer(1)));
        let last = concat_window(&mut tape, &stack, Window::LastM(3)).unwrap();
        for (k, layer) in (6..=8).enumerate() {
            let s = tape.value(last).slice_last(k * 4, 4).unwrap();
            assert_eq!(&s, tape.value(stack.layer(layer)));
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = seeded(1, 0);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, &mut rng, "a", Window::FirstN(2), 4, 0.1).unwrap();
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8]));
        let y = agg.aggregate(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_reduces_to_normalized_relu_of_first_layer() {
        let mut rng = seeded(2, 0);
        let mut store = ParamStore::new();
        let d = 5;
        let agg = Aggregator::new(&mut store, &mut rng, "a", Window::FirstN(1), d, 0.0).unwrap();
        store.set_value("a.proj.weight", Tensor::eye(d)).unwrap();
        let mut tape = Tape::eval();
        let stack = random_stack(&mut tape, &mut rng, 4, 2, 3, d);
        let y = agg.forward(&mut tape, &store, &stack).unwrap();
        let f1 = stack.layer(1);
        let n = tape.layer_norm(f1, None, None, LN_EPS).unwrap();
        let want = tape.relu(n);
        assert_eq!(tape.value(y), tape.value(want));
    }

    #[test]
    fn training_dropout_rate_is_binomial() {
        let mut rng = seeded(3, 0);
        let mut store = ParamStore::new();
        let d = 50;
        let agg = Aggregator::new(&mut store, &mut rng, "a", Window::FirstN(1), d, 0.1).unwrap();
        // Positive offset keeps every pre-dropout entry strictly positive.
        store.set_value("a.ln.offset", Tensor::full(&[d], 10.0)).unwrap();
        let mut tape = Tape::train(7, 0);
        let x = tape.constant(Tensor::from_fn(&[4, 100, d], |_| rng.random_range(-1.0..1.0)));
        let y = agg.aggregate(&mut tape, &store, x).unwrap();
        let n = tape.value(y).numel() as f64;
        let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n * 0.1 * 0.9).sqrt();
        assert!((zeros - 0.1 * n).abs() < 3.0 * sigma, "{zeros} of {n}");
    }

    #[test]
    fn eval_output_is_nonnegative_and_deterministic() {
        let mut rng = seeded(4, 0);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, &mut rng, "a", Window::LastM(2), 6, 0.1).unwrap();
        let mut tape = Tape::eval();
        let stack = random_stack(&mut tape, &mut rng, 5, 2, 4, 6);
        let a = agg.forward(&mut tape, &store, &stack).unwrap();
        let b = agg.forward(&mut tape, &store, &stack).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.value(a).data().iter().all(|&v| v >= 0.0));
        assert_eq!(tape.shape(a), &[2, 4, 6]);
    }

    #[test]
    fn aggregate_gradcheck() {
        let mut rng = seeded(5, 0);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, &mut rng, "a", Window::FirstN(3), 4, 0.1).unwrap();
        store.set_value("a.ln.offset", Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.2)).unwrap();
        let x = Tensor::from_fn(&[2, 3, 12], |_| rng.random_range(-1.0..1.0));
        let mix = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let leaves: Vec<ParamId> = store.trainable().collect();
        let report = grad_check(
            &mut store,
            &leaves,
            |tape, store| {
                let xv = tape.constant(x.clone());
                let y = agg.aggregate(tape, store, xv)?;
                let m = tape.constant(mix.clone());
                let ym = tape.reshape(y, &[6, 4])?;
                let mm = tape.reshape(m, &[6, 4])?;
                let p = tape.matmul_nt(ym, mm)?;
                Ok(tape.sum(p))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn modes_build_disjoint_or_no_parameters() {
        let cfg = AggregationConfig::default();
        for (mode, count) in [
            (AggregationMode::Learned, 8),
            (AggregationMode::FirstLast, 0),
            (AggregationMode::WindowMean, 0),
        ] {
            let mut store = ParamStore::new();
            let mut rng = seeded(6, 0);
            VisualAggregation::new(&mut store, &mut rng, &cfg, 8, 4, mode).unwrap();
            assert_eq!(store.len(), count);
        }
        let bad = AggregationConfig { n_low: 5, m_high: 4, dropout: 0.1 };
        assert!(matches!(bad.validate(8), Err(Error::Config(_))));
    }

    #[test]
    fn window_mean_averages_layers() {
        let mut rng = seeded(7, 0);
        let mut tape = Tape::eval();
        let stack = random_stack(&mut tape, &mut rng, 6, 1, 2, 3);
        let m = mean_window(&mut tape, &stack, Window::LastM(2)).unwrap();
        let (a, b) = (tape.value(stack.layer(5)), tape.value(stack.layer(6)));
        for i in 0..6 {
            let want = (a.data()[i] + b.data()[i]) * 0.5;
            assert!((tape.value(m).data()[i] - want).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn aggregate_matches_loop_oracle(
            seed in any::<u64>(), b in 1usize..3, l in 1usize..5, d in 2usize..7, k in 1usize..4
        ) {
            let mut rng = seeded(seed, 0);
            let mut store = ParamStore::new();
            let agg = Aggregator::new(&mut store, &mut rng, "a", Window::FirstN(k), d, 0.1).unwrap();
            store.set_value("a.proj.bias", Tensor::from_fn(&[d], |_| rng.random_range(-1.0..1.0))).unwrap();
            store.set_value("a.ln.gain", Tensor::from_fn(&[d], |_| rng.random_range(0.5..1.5))).unwrap();
            store.set_value("a.ln.offset", Tensor::from_fn(&[d], |_| rng.random_range(-0.5..0.5))).unwrap();
            let x = Tensor::from_fn(&[b, l, k * d], |_| rng.random_range(-1.0..1.0));
            let mut tape = Tape::eval();
            let xv = tape.constant(x.clone());
            let y = agg.aggregate(&mut tape, &store, xv).unwrap();
            let want = oracle(
                &x,
                store.value(agg.linear.weight),
                store.value(agg.linear.bias.unwrap()),
                store.value(agg.gain),
                store.value(agg.offset),
            );
            for (a, w) in tape.value(y).data().iter().zip(&want) {
                prop_assert!((a - w).abs() < 1e-10);
            }
        }
    }
}
