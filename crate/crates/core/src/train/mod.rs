//! Two-stage training: alignment pre-training then task-dispatched
//! contrastive fine-tuning, plus the recognizer and projection arms.

pub mod checkpoint;
pub mod examples;
mod optim;
mod stages;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::TaskType;
use crate::model::FreezeMask;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use examples::{split_utterances, Batch, ExampleBuilder, Key, Mining, Split, TrainExample};
pub use optim::{lr_schedule, lr_schedule_with_warmup, warmup_steps, AdamW};
pub use stages::{
    finetune_on_batches, finetune_stage, pretrain_stage, train_all, train_asr, train_projection,
    LossTelemetry, QueryEncoder,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub tau: f64,
    pub seed: u64,
    /// Keep the alignment loss active during fine-tuning.
    pub joint_pre_loss: bool,
    pub hard_negatives: usize,
    pub random_negatives: usize,
    pub tasks: Vec<TaskType>,
    pub stage1_trainable: FreezeMask,
    pub stage2_trainable: FreezeMask,
    /// Recognizer arm (CTC), trained alongside stage 1.
    pub asr_lr: f64,
    pub asr_epochs: usize,
    /// Projection arm, trained alongside stage 2; epochs per freeze stage.
    pub projection_lr: f64,
    pub projection_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_lr: 1e-5,
            stage2_lr: 8e-6,
            epochs_per_stage: 3,
            batch_size: 8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            tau: 0.07,
            seed: 0,
            joint_pre_loss: false,
            hard_negatives: 1,
            random_negatives: 6,
            tasks: TaskType::ALL.to_vec(),
            stage1_trainable: FreezeMask::ALIGN,
            stage2_trainable: FreezeMask::ALL,
            asr_lr: 1e-3,
            asr_epochs: 3,
            projection_lr: 8e-6,
            projection_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.stage2_lr),
            ("asr_lr", self.asr_lr),
            ("projection_lr", self.projection_lr),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be > 0, got {v}")));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train.warmup_fraction must be in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("train.tasks must not be empty".into()));
        }
        Ok(())
    }

    pub fn mining(&self) -> Mining {
        Mining {
            hard_negatives: self.hard_negatives,
            random_negatives: self.random_negatives,
            seed: self.seed,
        }
    }
}

/// Which stages of the two-stage recipe run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    Only1,
    Only2,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Only1 => "only1",
            Ablation::Only2 => "only2",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "only1" => Ok(Ablation::Only1),
            "only2" => Ok(Ablation::Only2),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (none|only1|only2)"))),
        }
    }
}

pub const STAGE1_TAG: &str = "stage1";
pub const STAGE2_TAG: &str = "stage2";

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub task: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn push(&mut self, stage: &str, step: usize, lr: f64, loss: f64, task: &str) {
        self.records.push(StepRecord {
            step,
            stage: stage.to_string(),
            lr,
            loss,
            task: task.to_string(),
        });
    }

    pub fn stage(&self, stage: &str) -> impl Iterator<Item = &StepRecord> + '_ {
        let stage = stage.to_string();
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}
