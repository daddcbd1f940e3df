//! Retriever training: isolated contrastive training of each path, iterative
//! teacher/student distillation between the paths, and optional joint
//! training of the concatenated dual ranker.

pub mod candidates;
mod distill;
mod eval;
mod isolated;
mod joint;
pub mod losses;
mod pretrain;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use candidates::{build_candidates, training_seeds, CandidateSeed, CandidateSet};
pub use distill::{
    run_iterative_distillation, DistillConfig, DistillationState, PathCheckpoint, RoundRecord,
};
pub use eval::{
    dense_rankings, dense_run, dual_query, dual_run, index_rankings, judge_run, mrr5, Evaluator,
};
pub use isolated::{train_isolated, TrainOutcome};
pub use joint::{train_joint, JointOutcome};
pub use losses::{contrastive_loss, kd_loss, kd_loss_with_temperature};
pub use pretrain::{pretrain_on_passages, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Decoupled weight decay; 0 is plain Adam.
    pub weight_decay: f64,
    pub hard_negatives: usize,
    pub seed: u64,
}

impl RetrieverTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(
                "lr must be positive and warmup_fraction in [0, 1]".into(),
            ));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub path: String,
    pub round: usize,
    pub step: u64,
    pub loss: Option<f64>,
    pub val_mrr5: Option<f64>,
    /// Reader validation exact match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_em: Option<f64>,
}

/// Collects metric records and optionally streams them as JSON lines.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let f =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn record(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&r).expect("record serialises");
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io("writing metrics log", e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }
}
