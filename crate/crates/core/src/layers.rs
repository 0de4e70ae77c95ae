//! Small parameterized building blocks shared by the encoders and the
//! interaction stages.

use rand::Rng;

use crate::error::Result;
use crate::numeric::rng::{orthogonal, scaled_uniform};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Variance-scaled uniform.
    Uniform,
    /// Random orthogonal rows/columns times a gain.
    Orthogonal(f64),
    Zeros,
}

/// `y = x W^T + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::Uniform => scaled_uniform(rng, &[d_out, d_in]),
            Init::Orthogonal(g) => orthogonal(rng, d_out, d_in, g),
            Init::Zeros => Tensor::zeros(&[d_out, d_in]),
        };
        let weight = store.add(format!("{name}.weight"), w, trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        trainable: bool,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden, true, trainable, Init::Uniform),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out, true, trainable, Init::Uniform),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}
