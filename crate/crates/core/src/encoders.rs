//! Inputs to the interaction mechanism: a frozen stand-in visual encoder that
//! exposes every block's output, soft-prompt text embeddings for the three
//! branches, the three visual heads, and low-rank adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::evaluation::Pair;
use crate::layers::{Init, Linear, Mlp};
use crate::numeric::rng::{normal, orthogonal, seeded};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width of each raw input vector.
    pub input_dim: usize,
    /// Number of patch tokens; `input_dim` is cut into this many chunks.
    pub patches: usize,
    /// Token width `d`.
    pub width: usize,
    /// Number of blocks `S`.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Multiplier on both residual branches of every block.
    pub branch_gain: f64,
    /// Low-rank adapter rank on the attention projections; 0 disables them.
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            patches: 8,
            width: 32,
            blocks: 8,
            heads: 4,
            mlp_ratio: 4,
            branch_gain: 1.0,
            lora_rank: 4,
            lora_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    /// Tokens per image: one [CLS] plus the patches.
    pub fn tokens(&self) -> usize {
        self.patches + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patches == 0 || !self.input_dim.is_multiple_of(self.patches) {
            return bad(format!(
                "encoder.input_dim {} is not divisible into {} patches",
                self.input_dim, self.patches
            ));
        }
        if self.width == 0 || self.blocks == 0 || self.mlp_ratio == 0 {
            return bad("encoder.width, blocks and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "encoder.width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.lora_rank > self.width {
            return Err(Error::Parameter(format!(
                "lora rank {} exceeds width {}",
                self.lora_rank, self.width
            )));
        }
        Ok(())
    }
}

/// Per-layer visual features `F_1..F_S`, each `[b, l, d]`, as nodes on a tape.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub layers: Vec<Var>,
    pub cls_index: usize,
}

impl FeatureStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> Var {
        self.layers[i - 1]
    }

    /// Loads precomputed layer values as constants.
    pub fn from_values(tape: &mut Tape, layers: &[Tensor], cls_index: usize) -> Self {
        Self {
            layers: layers.iter().map(|t| tape.constant(t.clone())).collect(),
            cls_index,
        }
    }
}

/// Frozen `W0` plus a trainable low-rank update `s * B A`.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LowRankAdapter {
    /// Wraps the frozen weight `base [d_out, d_in]`. `B` starts at zero so the
    /// adapted layer initially equals the frozen one.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        base: ParamId,
        rank: usize,
        scale: f64,
    ) -> Result<Self> {
        let shape = store.value(base).shape().to_vec();
        let (d_out, d_in) = (shape[0], shape[1]);
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Parameter(format!(
                "rank {rank} invalid for a [{d_out}, {d_in}] layer"
            )));
        }
        let a = store.add(
            format!("{name}.lora_a"),
            normal(rng, &[rank, d_in], 1.0 / (d_in as f64).sqrt()),
            true,
        );
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[d_out, rank]), true);
        Ok(Self { base, a, b, rank, scale })
    }

    /// `x (W0 + s B A)^T`, computed without materializing the sum.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w0 = tape.param(store, self.base);
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let base = tape.matmul_nt(x, w0)?;
        let low = tape.matmul_nt(x, a)?;
        let up = tape.matmul_nt(low, b)?;
        let up = tape.scale(up, self.scale);
        tape.add(base, up)
    }

    pub fn effective_weight(&self, store: &ParamStore) -> Tensor {
        let w0 = store.value(self.base);
        let (a, b) = (store.value(self.a), store.value(self.b));
        let (d_out, d_in) = (w0.shape()[0], w0.shape()[1]);
        Tensor::from_fn(&[d_out, d_in], |i| {
            let (r, c) = (i / d_in, i % d_in);
            let delta: f64 = (0..self.rank)
                .map(|k| b.data()[r * self.rank + k] * a.data()[k * d_in + c])
                .sum();
            w0.data()[i] + self.scale * delta
        })
    }
}

#[derive(Clone, Debug)]
enum Projection {
    Frozen(Linear),
    Adapted(LowRankAdapter),
}

impl Projection {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Projection::Frozen(l) => l.forward(tape, store, x),
            Projection::Adapted(a) => a.forward(tape, store, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: Projection,
    k: Projection,
    v: Projection,
    o: Projection,
    mlp: Mlp,
}

/// Frozen pre-layernorm transformer standing in for a pretrained image
/// backbone. Weights are random orthogonal; only adapters train.
#[derive(Clone, Debug)]
pub struct StandInEncoder {
    cfg: EncoderConfig,
    patch_proj: ParamId,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
}

impl StandInEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let pd = cfg.input_dim / cfg.patches;
        let mut proj = Vec::with_capacity(cfg.patches * w * pd);
        for _ in 0..cfg.patches {
            proj.extend(orthogonal(rng, w, pd, 1.0).into_data());
        }
        let patch_proj = store.add(
            "encoder.patch_proj",
            Tensor::new(vec![cfg.patches, w, pd], proj)?,
            false,
        );
        let pos = store.add("encoder.pos", normal(rng, &[cfg.tokens(), w], 0.1), false);
        let cls = store.add("encoder.cls", normal(rng, &[w], 1.0), false);
        // Adapters draw from their own stream so the frozen weights do not
        // depend on whether adapters exist.
        let mut adapter_rng = seeded(rng.random(), 11);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let name = format!("encoder.block{i}");
            let mut projs = Vec::with_capacity(4);
            for tag in ["q", "k", "v", "o"] {
                let lname = format!("{name}.attn.{tag}");
                let lin = Linear::new(store, rng, &lname, w, w, false, false, Init::Orthogonal(1.0));
                projs.push(if cfg.lora_rank == 0 {
                    Projection::Frozen(lin)
                } else {
                    Projection::Adapted(LowRankAdapter::new(
                        store,
                        &mut adapter_rng,
                        &lname,
                        lin.weight,
                        cfg.lora_rank,
                        cfg.lora_scale,
                    )?)
                });
            }
            let [q, k, v, o]: [Projection; 4] = projs.try_into().expect("four projections");
            let hidden = w * cfg.mlp_ratio;
            let mlp = Mlp {
                fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), w, hidden, false, false, Init::Orthogonal(1.0)),
                fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, w, false, false, Init::Orthogonal(1.0)),
            };
            blocks.push(Block { q, k, v, o, mlp });
        }
        Ok(Self { cfg: cfg.clone(), patch_proj, pos, cls, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn has_adapters(&self) -> bool {
        self.cfg.lora_rank > 0
    }

    /// Token embeddings `[b, l, d]`: a fixed [CLS] vector followed by one
    /// fixed random projection per input chunk, plus position vectors.
    pub fn embed(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        if x.rank() != 2 || x.shape()[1] != cfg.input_dim {
            return dim_err(format!(
                "encoder expects [b, {}] inputs, got {:?}",
                cfg.input_dim,
                x.shape()
            ));
        }
        let (b, w, l) = (x.shape()[0], cfg.width, cfg.tokens());
        let pd = cfg.input_dim / cfg.patches;
        let proj = store.value(self.patch_proj).data();
        let pos = store.value(self.pos).data();
        let cls = store.value(self.cls).data();
        let mut out = vec![0.0; b * l * w];
        for i in 0..b {
            let row = x.row(i);
            let base = i * l * w;
            for j in 0..w {
                out[base + j] = cls[j] + pos[j];
            }
            for p in 0..cfg.patches {
                let chunk = &row[p * pd..(p + 1) * pd];
                let tok = base + (p + 1) * w;
                for j in 0..w {
                    let m = &proj[(p * w + j) * pd..(p * w + j + 1) * pd];
                    let v: f64 = m.iter().zip(chunk).map(|(a, b)| a * b).sum();
                    out[tok + j] = v + pos[(p + 1) * w + j];
                }
            }
        }
        Tensor::new(vec![b, l, w], out)
    }

    /// Runs every block and returns all `S` block outputs.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<FeatureStack> {
        let tokens = self.embed(store, x)?;
        let mut h = tape.constant(tokens);
        let gain = self.cfg.branch_gain;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let n = tape.layer_norm(h, None, None, LN_EPS)?;
            let q = blk.q.forward(tape, store, n)?;
            let k = blk.k.forward(tape, store, n)?;
            let v = blk.v.forward(tape, store, n)?;
            let a = tape.attention(q, k, v, self.cfg.heads, 0.0)?;
            let a = blk.o.forward(tape, store, a)?;
            let a = tape.scale(a, gain);
            h = tape.add(h, a)?;
            let n = tape.layer_norm(h, None, None, LN_EPS)?;
            let m = blk.mlp.forward(tape, store, n)?;
            let m = tape.scale(m, gain);
            h = tape.add(h, m)?;
            layers.push(h);
        }
        Ok(FeatureStack { layers, cls_index: 0 })
    }

    /// Evaluation-mode encoding returned as plain values.
    pub fn encode_values(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::eval();
        let stack = self.encode(&mut tape, store, x)?;
        Ok(stack.layers.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Normalized [CLS] embedding from the final layer, `[b, d]`.
    pub fn cls_embedding(&self, tape: &mut Tape, stack: &FeatureStack) -> Result<Var> {
        let last = *stack.layers.last().expect("non-empty stack");
        let cls = tape.select_position(last, stack.cls_index)?;
        tape.layer_norm(cls, None, None, LN_EPS)
    }
}

/// Candidate prompt embeddings for the three branches, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct PromptBank {
    /// `[N_com, d]`
    pub com: Var,
    /// `[N_state, d]`
    pub state: Var,
    /// `[N_obj, d]`
    pub obj: Var,
}

/// Soft prompts: trainable state/object token tables inside frozen
/// "a photo of" templates, pooled by a frozen mixing layer.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub state_tokens: ParamId,
    pub object_tokens: ParamId,
    /// Frozen "a", "photo", "of".
    context: ParamId,
    /// Frozen literal word "object" in the state template.
    object_word: ParamId,
    mixing: ParamId,
}

impl PromptEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_states: usize,
        n_objects: usize,
        width: usize,
    ) -> Self {
        Self {
            state_tokens: store.add("prompt.state_tokens", normal(rng, &[n_states, width], 1.0), true),
            object_tokens: store.add("prompt.object_tokens", normal(rng, &[n_objects, width], 1.0), true),
            context: store.add("prompt.context", normal(rng, &[3, width], 1.0), false),
            object_word: store.add("prompt.object_word", normal(rng, &[width], 1.0), false),
            mixing: store.add("prompt.mixing", orthogonal(rng, width, width, 1.0), false),
        }
    }

    fn context_sum(&self, store: &ParamStore, with_object_word: bool) -> Tensor {
        let ctx = store.value(self.context);
        let w = ctx.last_dim();
        Tensor::from_fn(&[w], |j| {
            let base: f64 = (0..ctx.rows()).map(|r| ctx.row(r)[j]).sum();
            if with_object_word {
                base + store.value(self.object_word).data()[j]
            } else {
                base
            }
        })
    }

    /// Builds `t_com` for `pairs` plus `t_state` and `t_obj` for the whole
    /// vocabularies. Each row is the frozen mixing of the mean token embedding
    /// of its template.
    pub fn build(&self, tape: &mut Tape, store: &ParamStore, pairs: &[Pair]) -> Result<PromptBank> {
        let n_states = store.value(self.state_tokens).shape()[0];
        let n_objects = store.value(self.object_tokens).shape()[0];
        if let Some(p) = pairs.iter().find(|p| p.state >= n_states || p.object >= n_objects) {
            return Err(Error::Vocabulary(format!(
                "pair ({}, {}) references a token outside {n_states} states x {n_objects} objects",
                p.state, p.object
            )));
        }
        let es = tape.param(store, self.state_tokens);
        let eo = tape.param(store, self.object_tokens);
        let mix = tape.param(store, self.mixing);
        let ctx = tape.constant(self.context_sum(store, false));
        let ctx_obj = tape.constant(self.context_sum(store, true));

        // "a photo of [state] [object]"
        let s_idx: Vec<usize> = pairs.iter().map(|p| p.state).collect();
        let o_idx: Vec<usize> = pairs.iter().map(|p| p.object).collect();
        let rs = tape.gather_rows(es, &s_idx)?;
        let ro = tape.gather_rows(eo, &o_idx)?;
        let com = tape.add(rs, ro)?;
        let com = tape.add_bias(com, ctx)?;
        let com = tape.scale(com, 1.0 / 5.0);
        let com = tape.matmul_nt(com, mix)?;

        // "a photo of [state] object"
        let state = tape.add_bias(es, ctx_obj)?;
        let state = tape.scale(state, 1.0 / 5.0);
        let state = tape.matmul_nt(state, mix)?;

        // "a photo of [object]"
        let obj = tape.add_bias(eo, ctx)?;
        let obj = tape.scale(obj, 1.0 / 4.0);
        let obj = tape.matmul_nt(obj, mix)?;
        Ok(PromptBank { com, state, obj })
    }
}

/// Visual representations for the three branches.
#[derive(Clone, Copy, Debug)]
pub struct VisualEmbeddings {
    pub com: Var,
    pub state: Var,
    pub obj: Var,
}

/// Three independent MLPs over the [CLS] embedding.
#[derive(Clone, Debug)]
pub struct VisualHeads {
    pub com: Mlp,
    pub state: Mlp,
    pub obj: Mlp,
}

impl VisualHeads {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, width: usize, hidden: usize) -> Self {
        Self {
            com: Mlp::new(store, rng, "heads.com", width, hidden, width, true),
            state: Mlp::new(store, rng, "heads.state", width, hidden, width, true),
            obj: Mlp::new(store, rng, "heads.obj", width, hidden, width, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Result<VisualEmbeddings> {
        Ok(VisualEmbeddings {
            com: self.com.forward(tape, store, cls)?,
            state: self.state.forward(tape, store, cls)?,
            obj: self.obj.forward(tape, store, cls)?,
        })
    }
}
