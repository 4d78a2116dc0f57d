//! Optimizer, schedules, checkpoints and the two training loops.

mod checkpoint;
mod optim;
mod runner;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION,
    MAGIC,
};
pub use optim::{adamw_step, clip_global_norm, lr_schedule, AdamWConfig, OptimState};
pub use runner::{run_finetune, run_pretrain, EpochRecord, Phase, TrainOutcome};

/// Where the within-modal terms of the second stage draw their batch from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WithinModalBatch {
    /// The same mini-batch as the cross-modal term.
    Shared,
    /// A separately shuffled mini-batch.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub finetune_batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    /// The learning rate is divided by this from the halfway step of a stage.
    pub lr_decay: f64,
    pub pretrain_warmup: f64,
    pub finetune_warmup: f64,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Fresh optimizer moments when stage 2 starts.
    pub reset_optimizer: bool,
    pub within_modal: WithinModalBatch,
    /// Validation Rsum after every epoch, keeping the best weights.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 15,
            stage2_epochs: 5,
            finetune_epochs: 10,
            batch_size: 32,
            finetune_batch_size: 32,
            lr: 1e-3,
            finetune_lr: 5e-4,
            lr_decay: 10.0,
            pretrain_warmup: 0.0,
            finetune_warmup: 0.1,
            optimizer: AdamWConfig::default(),
            clip_norm: 5.0,
            reset_optimizer: true,
            within_modal: WithinModalBatch::Shared,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |f: &str, why: String| out.push((format!("train.{f}"), why));
        for (f, b) in [("batch_size", self.batch_size), ("finetune_batch_size", self.finetune_batch_size)] {
            if b < 2 {
                bad(f, format!("{b} is below 2; contrastive batches need negatives"));
            }
        }
        for (f, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                bad(f, format!("{v} is not a positive learning rate"));
            }
        }
        if !(self.lr_decay >= 1.0 && self.lr_decay.is_finite()) {
            bad("lr_decay", format!("{} must be at least 1", self.lr_decay));
        }
        for (f, v) in [("pretrain_warmup", self.pretrain_warmup), ("finetune_warmup", self.finetune_warmup)] {
            if !(0.0..1.0).contains(&v) {
                bad(f, format!("{v} is not a fraction in [0, 1)"));
            }
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            bad("optimizer", "betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            bad("optimizer", "eps must be positive and weight_decay non-negative".into());
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            bad("clip_norm", format!("{} must be non-negative", self.clip_norm));
        }
        out
    }
}
