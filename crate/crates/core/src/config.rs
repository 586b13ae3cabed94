//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::DataConfig;
use crate::train::checkpoint::sha256_hex;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub wer: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { wer: 0.15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repeats: usize,
    /// Held-out queries timed per repeat.
    pub queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repeats: 7, queries: 100 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.vocab != self.model.vocab || self.data.speech_dim != self.model.speech_dim {
            return Err(Error::Config(format!(
                "data (vocab {}, speech_dim {}) disagrees with model (vocab {}, speech_dim {})",
                self.data.vocab, self.data.speech_dim, self.model.vocab, self.model.speech_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.wer) {
            return Err(Error::Config(format!("eval.wer must be in [0, 1], got {}", self.eval.wer)));
        }
        if self.bench.repeats < 5 || self.bench.queries == 0 {
            return Err(Error::Config("bench.repeats must be >= 5 and bench.queries >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the fully resolved config with keys sorted.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(&serde_json::to_value(self)?)
    }
}

/// Hash of compact JSON with object keys in sorted order.
pub fn canonical_hash(value: &serde_json::Value) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(&sort_keys(value))?))
}

fn sort_keys(v: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut entries: Vec<_> = m.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k.clone(), sort_keys(v))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}
