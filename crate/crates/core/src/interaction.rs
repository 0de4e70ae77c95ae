//! Two-stage cross-attention of prompt embeddings over the aggregated visual
//! features, and the weighted fusion of the three prompt versions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{Init, Linear, Mlp};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Largest head count dividing `width`, capped at 12.
pub fn default_heads(width: usize) -> usize {
    (1..=12.min(width)).rev().find(|h| width.is_multiple_of(*h)).unwrap_or(1)
}

/// Which visual positions a prompt attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyScope {
    /// Each image's own `l` tokens; prompts become image-specific.
    #[default]
    Image,
    /// All `b * l` tokens of the batch; one prompt set per batch.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    /// Attention heads; unset picks the largest divisor of the width up to 12.
    pub heads: Option<usize>,
    pub dropout: f64,
    pub ffn_expansion: usize,
    pub lambda_init: f64,
    pub key_scope: KeyScope,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self { heads: None, dropout: 0.1, ffn_expansion: 4, lambda_init: 0.1, key_scope: KeyScope::Image }
    }
}

impl InteractionConfig {
    pub fn resolved_heads(&self, width: usize) -> usize {
        self.heads.unwrap_or_else(|| default_heads(width))
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        let h = self.resolved_heads(width);
        if h == 0 || !width.is_multiple_of(h) {
            return Err(Error::Config(format!("interaction.heads = {h} does not divide width {width}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("interaction.dropout {} not in [0, 1)", self.dropout)));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("interaction.ffn_expansion must be >= 1".into()));
        }
        if !self.lambda_init.is_finite() {
            return Err(Error::Config("interaction.lambda_init must be finite".into()));
        }
        Ok(())
    }
}

/// Multi-head attention of prompt queries over visual keys/values with
/// learned projections and a residual connection.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl CrossAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        let mut lin = |part: &str| {
            Linear::new(store, rng, &format!("{name}.{part}"), width, width, true, true, Init::Uniform)
        };
        Ok(Self { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o"), heads, dropout })
    }

    /// `t [N, d]` or `[b', N, d]` attends over `f [b, l, d]`; the result is
    /// `[b, N, d]` (image scope) or `[1, N, d]` (batch scope).
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: Var,
        f: Var,
        scope: KeyScope,
    ) -> Result<Var> {
        let fs = tape.shape(f).to_vec();
        if fs.len() != 3 {
            return dim_err(format!("visual features must be [b, l, d], got {fs:?}"));
        }
        let f = match scope {
            KeyScope::Image => f,
            KeyScope::Batch => tape.reshape(f, &[1, fs[0] * fs[1], fs[2]])?,
        };
        let b = tape.shape(f)[0];
        let (q, t) = match tape.shape(t).len() {
            2 => {
                let q = self.q.forward(tape, store, t)?;
                (tape.broadcast_batch(q, b)?, tape.broadcast_batch(t, b)?)
            }
            _ => (self.q.forward(tape, store, t)?, t),
        };
        let k = self.k.forward(tape, store, f)?;
        let v = self.v.forward(tape, store, f)?;
        let a = tape.attention(q, k, v, self.heads, self.dropout)?;
        let o = self.o.forward(tape, store, a)?;
        tape.add(o, t)
    }
}

/// Cross-attention followed by a residual feed-forward block.
#[derive(Clone, Debug)]
pub struct InteractionStage {
    pub attn: CrossAttentionBlock,
    pub ffn: Mlp,
}

impl InteractionStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        cfg: &InteractionConfig,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let attn = CrossAttentionBlock::new(
            store,
            rng,
            &format!("{name}.attn"),
            width,
            cfg.resolved_heads(width),
            cfg.dropout,
        )?;
        let ffn = Mlp::new(store, rng, &format!("{name}.ffn"), width, cfg.ffn_expansion * width, width, true);
        Ok(Self { attn, ffn })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: Var,
        f: Var,
        scope: KeyScope,
    ) -> Result<Var> {
        let t1 = self.attn.cross_attend(tape, store, t, f, scope)?;
        let m = self.ffn.forward(tape, store, t1)?;
        tape.add(m, t1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    pub lambda1: ParamId,
    pub lambda2: ParamId,
}

impl FusionWeights {
    pub fn new(store: &mut ParamStore, name: &str, init: f64) -> Self {
        Self {
            lambda1: store.add(format!("{name}.lambda1"), Tensor::full(&[1], init), true),
            lambda2: store.add(format!("{name}.lambda2"), Tensor::full(&[1], init), true),
        }
    }
}

/// `t + l1 * t1 + l2 * t2`, skipping absent terms.
pub fn fuse(
    tape: &mut Tape,
    t: Var,
    t1: Option<(Var, Var)>,
    t2: Option<(Var, Var)>,
) -> Result<Var> {
    let mut out = t;
    for (ti, lambda) in [t1, t2].into_iter().flatten() {
        if tape.shape(ti) != tape.shape(t) {
            return dim_err(format!(
                "fusion of {:?} with {:?}",
                tape.shape(t),
                tape.shape(ti)
            ));
        }
        let scaled = tape.scale_by(ti, lambda)?;
        out = tape.add(out, scaled)?;
    }
    Ok(out)
}

/// Which parts of the interaction are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub stage1: bool,
    pub stage2: bool,
    /// Whether `l1 * t1` enters the fusion.
    pub fuse_first: bool,
}

impl Default for StageLayout {
    fn default() -> Self {
        Self { stage1: true, stage2: true, fuse_first: true }
    }
}

/// Interaction stack for one prompt branch.
#[derive(Clone, Debug)]
pub struct BranchInteraction {
    pub stage1: Option<InteractionStage>,
    pub stage2: Option<InteractionStage>,
    pub fusion: FusionWeights,
    pub layout: StageLayout,
    pub scope: KeyScope,
}

impl BranchInteraction {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        cfg: &InteractionConfig,
        layout: StageLayout,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let stage1 = layout
            .stage1
            .then(|| InteractionStage::new(store, rng, &format!("{name}.stage1"), width, cfg))
            .transpose()?;
        let stage2 = layout
            .stage2
            .then(|| InteractionStage::new(store, rng, &format!("{name}.stage2"), width, cfg))
            .transpose()?;
        let fusion = FusionWeights::new(store, &format!("{name}.fusion"), cfg.lambda_init);
        Ok(Self { stage1, stage2, fusion, layout, scope: cfg.key_scope })
    }

    /// Refines prompts `t [N, d]` against `f_low`, `f_high [b, l, d]`,
    /// giving `[b, N, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: Var,
        f_low: Var,
        f_high: Var,
    ) -> Result<Var> {
        let batch = tape.shape(f_low)[0];
        let t1 = match &self.stage1 {
            Some(s) => Some(s.forward(tape, store, t, f_low, self.scope)?),
            None => None,
        };
        let t2 = match &self.stage2 {
            Some(s) => Some(s.forward(tape, store, t1.unwrap_or(t), f_high, self.scope)?),
            None => None,
        };
        let l1 = tape.param(store, self.fusion.lambda1);
        let l2 = tape.param(store, self.fusion.lambda2);
        let rows = |tape: &mut Tape, x: Var| -> Result<Var> {
            let s = tape.shape(x).to_vec();
            if s.len() == 2 {
                tape.broadcast_batch(x, batch)
            } else if s[0] == batch {
                Ok(x)
            } else {
                let flat = tape.reshape(x, &[s[1], s[2]])?;
                tape.broadcast_batch(flat, batch)
            }
        };
        let base = rows(tape, t)?;
        let first = match t1 {
            Some(x) if self.layout.fuse_first => Some((rows(tape, x)?, l1)),
            _ => None,
        };
        let second = match t2 {
            Some(x) => Some((rows(tape, x)?, l2)),
            None => None,
        };
        fuse(tape, base, first, second)
    }
}

#[cfg(test)]
mod tests;
