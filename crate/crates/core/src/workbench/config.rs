//! Run configuration: one TOML document with a table per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::AggregationConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::World;
use crate::interaction::InteractionConfig;
use crate::model::{Architecture, ModelConfig};
use crate::objective::LossConfig;
use crate::training::TrainConfig;

use super::synthetic::SyntheticTaskSpec;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Split directory with features; unset generates the synthetic task.
    pub dir: Option<PathBuf>,
    /// Generator settings. The run seed is added to `synthetic.seed`.
    pub synthetic: SyntheticTaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub world: World,
    /// Open-world feasibility threshold; unset picks it on validation.
    pub threshold: Option<f64>,
    /// Cap on candidate thresholds tried when picking one.
    pub max_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { world: World::Closed, threshold: None, max_thresholds: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub aggregation: AggregationConfig,
    pub interaction: InteractionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML, rejecting every unknown key at once.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Usage(format!("malformed config: {e}")))?;
        let mut unknown = Vec::new();
        unknown_keys(&doc, &schema(), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Usage(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("malformed config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.train.validate()?;
        if self.eval.max_thresholds < 2 {
            return Err(Error::Config("eval.max_thresholds must be >= 2".into()));
        }
        if let Some(t) = self.eval.threshold {
            if t.is_nan() {
                return Err(Error::Config("eval.threshold is NaN".into()));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            model: self.model.clone(),
            encoder: self.encoder.clone(),
            aggregation: self.aggregation.clone(),
            interaction: self.interaction.clone(),
            loss: self.loss.clone(),
        }
    }

    /// Generator settings for this run's seed.
    pub fn synthetic_spec(&self) -> SyntheticTaskSpec {
        let mut spec = self.data.synthetic.clone();
        spec.seed = spec.seed.wrapping_add(self.seed);
        spec
    }

    /// Hex digest of the configuration with the seed cleared.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { seed: 0, ..self.clone() }.to_toml();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Every accepted key, with optional ones filled in.
fn schema() -> toml::Table {
    let mut full = RunConfig::default();
    full.interaction.heads = Some(1);
    full.data.dir = Some(PathBuf::new());
    full.eval.threshold = Some(0.0);
    toml::Table::try_from(full).expect("config serializes")
}

fn unknown_keys(doc: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in doc {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (schema.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(s)), toml::Value::Table(d)) => unknown_keys(d, s, &path, out),
            _ => {}
        }
    }
}
