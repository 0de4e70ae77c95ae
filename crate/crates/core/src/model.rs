//! The full three-branch model: stand-in encoder, layer aggregation,
//! per-branch two-stage interaction, and cosine classifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationConfig, AggregationMode, VisualAggregation};
use crate::encoders::{EncoderConfig, FeatureStack, PromptEncoder, StandInEncoder, VisualHeads};
use crate::error::{dim_err, Error, Result};
use crate::evaluation::{BranchLogits, CandidateSet, Pair};
use crate::interaction::{BranchInteraction, InteractionConfig, StageLayout};
use crate::numeric::rng::seeded;
use crate::numeric::{ParamStore, Tape, Tensor, Var};
use crate::objective::{branch_logits, branch_loss, total_loss, LossConfig};

/// Full model or one of the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Raw first and last layer instead of learned aggregation.
    AggA,
    /// Layerwise window means instead of learned aggregation.
    AggB,
    /// No first (low-level) interaction stage.
    MsA,
    /// No second (high-level) interaction stage.
    MsB,
    /// No `l1 * t1` term in the fusion.
    Df,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::AggA,
        Variant::AggB,
        Variant::MsA,
        Variant::MsB,
        Variant::Df,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AggA => "agg_a",
            Variant::AggB => "agg_b",
            Variant::MsA => "ms_a",
            Variant::MsB => "ms_b",
            Variant::Df => "df",
        }
    }

    pub fn aggregation(self) -> AggregationMode {
        match self {
            Variant::AggA => AggregationMode::FirstLast,
            Variant::AggB => AggregationMode::WindowMean,
            _ => AggregationMode::Learned,
        }
    }

    pub fn layout(self) -> StageLayout {
        match self {
            Variant::MsA => StageLayout { stage1: false, stage2: true, fuse_first: false },
            Variant::MsB => StageLayout { stage1: true, stage2: false, fuse_first: true },
            Variant::Df => StageLayout { stage1: true, stage2: true, fuse_first: false },
            _ => StageLayout::default(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant '{s}' (full|agg_a|agg_b|ms_a|ms_b|df)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden width of the visual heads, as a multiple of the token width.
    pub head_hidden_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: Variant::Full, head_hidden_ratio: 2 }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub aggregation: AggregationConfig,
    pub interaction: InteractionConfig,
    pub loss: LossConfig,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregation.validate(self.encoder.blocks)?;
        self.interaction.validate(self.encoder.width)?;
        self.loss.validate()?;
        if self.model.head_hidden_ratio == 0 {
            return Err(Error::Config("model.head_hidden_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-branch logits on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    pub com: Var,
    pub state: Var,
    pub obj: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub state: Var,
    pub object: Var,
    pub composition: Var,
    pub floored: usize,
}

/// Visual input for a batch: raw vectors, or precomputed encoder layers.
#[derive(Clone, Copy, Debug)]
pub enum VisualInput<'a> {
    Raw(&'a Tensor),
    Layers(&'a [Tensor]),
}

#[derive(Clone, Debug)]
pub struct CompositionModel {
    pub arch: Architecture,
    pub n_states: usize,
    pub n_objects: usize,
    pub seed: u64,
    pub store: ParamStore,
    pub encoder: StandInEncoder,
    pub prompts: PromptEncoder,
    pub heads: VisualHeads,
    pub aggregation: VisualAggregation,
    /// Composition, state and object interaction stacks.
    pub interactions: [BranchInteraction; 3],
}

const BRANCHES: [&str; 3] = ["com", "state", "obj"];

impl CompositionModel {
    pub fn new(arch: &Architecture, n_states: usize, n_objects: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if n_states == 0 || n_objects == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        let w = arch.encoder.width;
        let mut store = ParamStore::new();
        let encoder = StandInEncoder::new(&mut store, &mut seeded(seed, 1), &arch.encoder)?;
        let prompts = PromptEncoder::new(&mut store, &mut seeded(seed, 2), n_states, n_objects, w);
        let heads = VisualHeads::new(&mut store, &mut seeded(seed, 3), w, w * arch.model.head_hidden_ratio);
        let aggregation = VisualAggregation::new(
            &mut store,
            &mut seeded(seed, 4),
            &arch.aggregation,
            arch.encoder.blocks,
            w,
            arch.model.variant.aggregation(),
        )?;
        let layout = arch.model.variant.layout();
        let mut branch = |i: usize| {
            BranchInteraction::new(
                &mut store,
                &mut seeded(seed, 5 + i as u64),
                &format!("interaction.{}", BRANCHES[i]),
                w,
                &arch.interaction,
                layout,
            )
        };
        let interactions = [branch(0)?, branch(1)?, branch(2)?];
        Ok(Self {
            arch: arch.clone(),
            n_states,
            n_objects,
            seed,
            store,
            encoder,
            prompts,
            heads,
            aggregation,
            interactions,
        })
    }

    pub fn variant(&self) -> Variant {
        self.arch.model.variant
    }

    /// True when no encoder weight trains, so layer outputs can be cached.
    pub fn encoder_is_frozen(&self) -> bool {
        !self.encoder.has_adapters()
    }

    /// Evaluation-mode encoder layers for `x`, for caching.
    pub fn encode_layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.encoder.encode_values(&self.store, x)
    }

    fn stack(&self, tape: &mut Tape, store: &ParamStore, input: VisualInput<'_>) -> Result<(FeatureStack, usize)> {
        match input {
            VisualInput::Raw(x) => Ok((self.encoder.encode(tape, store, x)?, x.shape()[0])),
            VisualInput::Layers(layers) => {
                if layers.len() != self.arch.encoder.blocks {
                    return dim_err(format!(
                        "{} cached layers for an encoder of depth {}",
                        layers.len(),
                        self.arch.encoder.blocks
                    ));
                }
                if !self.encoder_is_frozen() {
                    return Err(Error::Config("cached layers bypass trainable encoder adapters".into()));
                }
                Ok((FeatureStack::from_values(tape, layers, 0), layers[0].shape()[0]))
            }
        }
    }

    /// Temperature-scaled logits of all three branches; the composition
    /// branch scores `candidates`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: VisualInput<'_>,
        candidates: &[Pair],
    ) -> Result<BranchOutputs> {
        self.forward_with(&self.store, tape, input, candidates)
    }

    /// [`Self::forward`] with parameter values taken from `store`, which must
    /// share this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        input: VisualInput<'_>,
        candidates: &[Pair],
    ) -> Result<BranchOutputs> {
        if candidates.is_empty() {
            return Err(Error::Config("empty candidate set".into()));
        }
        let (stack, _) = self.stack(tape, store, input)?;
        let (f_low, f_high) = self.aggregation.forward(tape, store, &stack)?;
        let cls = self.encoder.cls_embedding(tape, &stack)?;
        let v = self.heads.forward(tape, store, cls)?;
        let bank = self.prompts.build(tape, store, candidates)?;
        let tau = self.arch.loss.temperature;
        let mut out = [v.com; 3];
        for (i, (vis, t)) in [(v.com, bank.com), (v.state, bank.state), (v.obj, bank.obj)]
            .into_iter()
            .enumerate()
        {
            let refined = self.interactions[i].forward(tape, store, t, f_low, f_high)?;
            out[i] = branch_logits(tape, vis, refined, tau)?;
        }
        Ok(BranchOutputs { com: out[0], state: out[1], obj: out[2] })
    }

    /// Weighted three-branch loss; `labels` are true pairs, all of which must
    /// be among `candidates`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        input: VisualInput<'_>,
        labels: &[Pair],
        candidates: &[Pair],
    ) -> Result<LossParts> {
        self.loss_with(&self.store, tape, input, labels, candidates)
    }

    pub fn loss_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        input: VisualInput<'_>,
        labels: &[Pair],
        candidates: &[Pair],
    ) -> Result<LossParts> {
        let com_labels = labels
            .iter()
            .map(|p| {
                candidates.iter().position(|c| c == p).ok_or_else(|| {
                    Error::Integrity(format!("training label ({}, {}) is not a candidate", p.state, p.object))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s_labels: Vec<usize> = labels.iter().map(|p| p.state).collect();
        let o_labels: Vec<usize> = labels.iter().map(|p| p.object).collect();
        let out = self.forward_with(store, tape, input, candidates)?;
        let mut parts = Vec::with_capacity(3);
        let mut floored = 0;
        for (logits, lab) in [(out.state, &s_labels), (out.obj, &o_labels), (out.com, &com_labels)] {
            let p = tape.softmax(logits, 1)?;
            let l = branch_loss(tape, p, lab)?;
            floored += l.floored;
            parts.push(l.loss);
        }
        let total = total_loss(tape, parts[0], parts[1], parts[2], self.arch.loss.weights())?;
        Ok(LossParts { total, state: parts[0], object: parts[1], composition: parts[2], floored })
    }

    /// Evaluation-mode logits for every item in `x`, in batches of `batch`.
    pub fn score(
        &self,
        x: &Tensor,
        layers: Option<&[Tensor]>,
        candidates: &CandidateSet,
        batch: usize,
    ) -> Result<BranchLogits> {
        let n = x.shape()[0];
        let batch = batch.max(1);
        let (mut com, mut st, mut ob) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::eval();
            let out = match layers {
                Some(all) => {
                    let sub = gather_layers(all, &idx)?;
                    self.forward(&mut tape, VisualInput::Layers(&sub), &candidates.pairs)?
                }
                None => {
                    let sub = gather_rows(x, &idx)?;
                    self.forward(&mut tape, VisualInput::Raw(&sub), &candidates.pairs)?
                }
            };
            com.extend_from_slice(tape.value(out.com).data());
            st.extend_from_slice(tape.value(out.state).data());
            ob.extend_from_slice(tape.value(out.obj).data());
            start = end;
        }
        Ok(BranchLogits {
            candidates: candidates.clone(),
            com: Tensor::new(vec![n, candidates.len()], com)?,
            state: Tensor::new(vec![n, self.n_states], st)?,
            obj: Tensor::new(vec![n, self.n_objects], ob)?,
        })
    }

    /// Sorted names of all parameters.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.store.names().map(String::from).collect();
        v.sort();
        v
    }
}

/// Rows `idx` of `x [n, ..]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = x.shape()[0];
    let row = x.numel() / n;
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return dim_err(format!("row {i} out of range for {n}"));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

pub fn gather_layers(layers: &[Tensor], idx: &[usize]) -> Result<Vec<Tensor>> {
    layers.iter().map(|l| gather_rows(l, idx)).collect()
}

#[cfg(test)]
pub(crate) mod tests;
