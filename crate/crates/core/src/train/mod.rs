//! Training loops, optimizer, schedule, checkpoints and metrics.

mod checkpoint;
pub mod data;
mod metrics;
mod optim;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{parse_header, Checkpoint, CheckpointError, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, MetricRecord, MetricsLog};
pub use optim::{Adam, AdamConfig};
pub use schedule::lr_schedule;
pub use trainer::{
    evaluate, exact_match, finetune, fit, greedy_decode, pretrain, seq2seq_loss, Metric, StepStats, Trainer,
};

use crate::corruption::{CorruptionConfig, CorruptionError};
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SpanCorruption,
    Autoencode,
    #[serde(alias = "seq2seq")]
    Seq2seqFinetune,
    #[serde(alias = "retrieval")]
    RetrievalFinetune,
}

impl std::str::FromStr for Task {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "span_corruption" => Ok(Self::SpanCorruption),
            "autoencode" => Ok(Self::Autoencode),
            "seq2seq" | "seq2seq_finetune" => Ok(Self::Seq2seqFinetune),
            "retrieval" | "retrieval_finetune" => Ok(Self::RetrievalFinetune),
            other => Err(TrainError::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::SpanCorruption => "span_corruption",
            Task::Autoencode => "autoencode",
            Task::Seq2seqFinetune => "seq2seq_finetune",
            Task::RetrievalFinetune => "retrieval_finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Documents longer than this are cropped at a random offset.
    pub sequence_length: usize,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub seed: u64,
    pub task: Task,
    pub graft_decal: bool,
    pub log_every: u64,
    pub corruption: CorruptionConfig,
    /// Stop early once teacher-forced accuracy over the whole training set
    /// reaches this value (checked every `log_every` steps by [`fit`]).
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            sequence_length: 256,
            warmup_steps: 500,
            base_lr: 1e-3,
            seed: 0,
            task: Task::SpanCorruption,
            graft_decal: false,
            log_every: 50,
            corruption: CorruptionConfig::default(),
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.sequence_length < 2 {
            return bad("sequence_length must be at least 2");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be finite and non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        self.corruption.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("non-finite values at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
