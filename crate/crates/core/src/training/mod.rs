//! Pre-training, fine-tuning, the contrastive-term ablation and gradient checks.

mod ablation;
mod finetune;
pub mod gradcheck;
mod log;
mod pretrain;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use ablation::{eeg_channels, run_ablation, AblationArm, AblationReport, AblationSeed};
pub use finetune::{finetune, predict, FinetuneOutcome, HeadSettings};
pub use log::{FinetuneEval, FinetuneStep, PretrainEval, PretrainStep, RunLog};
pub use pretrain::pretrain;

use crate::error::{Error, Result};
use crate::losses::{IcclConfig, ReconTarget};
use crate::optim::OptimizerConfig;
use crate::rng::Rng;

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Validation evaluations without improvement before stopping; `None`
    /// disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub iccl_enabled: bool,
    pub iccl: IcclConfig,
    pub recon_target: ReconTarget,
    /// Steps between validation evaluations.
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Draw new masks every step; otherwise each training epoch keeps one
    /// mask pair for the whole run.
    pub fresh_masks: bool,
    /// Fine-tuning only: train the head alone.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 2000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            early_stop_patience: Some(10),
            iccl_enabled: true,
            iccl: IcclConfig::default(),
            recon_target: ReconTarget::Visible,
            checkpoint_every: 100,
            clip_norm: DEFAULT_CLIP_NORM,
            fresh_masks: true,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.learning_rate;
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("batch_size and checkpoint_every must be positive".into()));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {lr} must be positive")));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidConfig(format!("clip norm {} must be non-negative", self.clip_norm)));
        }
        IcclConfig::new(self.iccl.margin_alpha)?;
        Ok(())
    }
}

/// Endless shuffled passes over `0..n`.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, rng: Rng) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size.min(self.order.len()) {
            self.reshuffle_if_done();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Tracks the best validation score and the patience budget.
pub(crate) struct EarlyStop {
    patience: Option<usize>,
    since_best: usize,
}

impl EarlyStop {
    pub(crate) fn new(patience: Option<usize>) -> Self {
        Self { patience, since_best: 0 }
    }

    /// Records one evaluation; returns true when training should stop.
    pub(crate) fn record(&mut self, improved: bool) -> bool {
        if improved {
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience.is_some_and(|p| self.since_best > p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn sampler_covers_each_pass() {
        let mut s = BatchSampler::new(10, rng_for(1, "t"));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch(32).len(), 10);
    }

    #[test]
    fn patience() {
        let mut e = EarlyStop::new(Some(2));
        assert!(!e.record(true));
        assert!(!e.record(false));
        assert!(!e.record(false));
        assert!(e.record(false));
        let mut never = EarlyStop::new(None);
        assert!((0..100).all(|_| !never.record(false)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.optimizer.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
