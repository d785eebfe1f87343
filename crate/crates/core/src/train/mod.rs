//! Optimiser, stage loop and the three-stage pipeline.

mod adam;
mod log;
mod pcgrad;
mod pipeline;
mod stage;
mod step;

use serde::{Deserialize, Serialize};

pub use adam::{cosine_lr, Adam, AdamConfig};
pub use log::{EpochRow, TrainLog, ValRow};
pub use pcgrad::{pcgrad_combine, project};
pub use pipeline::{fingerprint, run_pipeline, PipelineOutcome, RunManifest, RunSpec, StageRecord, StageStatus};
pub use stage::{run_stage, EarlyStopping, Stage, StageOutcome, StagePlan};
pub use step::{clip_global_norm, compute_gradients, Objective, StepOptions, StepOutput};

use crate::error::{Error, Result};
use crate::model::LossMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    #[default]
    #[serde(rename = "hr@20")]
    Hr20,
    #[serde(rename = "ndcg@20")]
    Ndcg20,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    /// Rows per forward/backward pass inside a batch; memory knob only.
    pub micro_batch: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub selection: SelectionMetric,
    pub pcgrad: bool,
    pub clip_norm: Option<f64>,
    pub loss: LossMode,
    /// Run stage 1 (and stage 2). Off gives the from-scratch variant.
    pub pretrain: bool,
    /// Run stage 2.
    pub warmup: bool,
    /// Carry stage-1 CAM weights into stage 2 instead of reinitialising.
    pub carry_cam: bool,
    /// Reverse trajectories averaged per user at validation.
    pub eval_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_min: 0.0,
            batch_size: 512,
            micro_batch: 128,
            stage1_epochs: 500,
            stage2_epochs: 5,
            stage3_epochs: 500,
            validate_every: 5,
            patience: 4,
            selection: SelectionMetric::Hr20,
            pcgrad: false,
            clip_norm: None,
            loss: LossMode::Joint,
            pretrain: true,
            warmup: true,
            carry_cam: false,
            eval_repeats: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return bad("need 0 <= lr_min <= lr and lr > 0");
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.validate_every == 0 || self.patience == 0 {
            return bad("validate_every and patience must be positive");
        }
        if self.stage2_epochs > 5 {
            return bad("stage 2 runs at most 5 epochs");
        }
        if self.eval_repeats == 0 {
            return bad("eval_repeats must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }
}
