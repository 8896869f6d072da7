use serde::{Deserialize, Serialize};

use super::{pretrain, TrainConfig};
use crate::dataio::EpochDataset;
use crate::error::Result;
use crate::evaluation::{reconstruction_mse_report, ReconEvalOptions};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub iccl_enabled: bool,
    pub step0_total: Option<f64>,
    pub best_step: Option<usize>,
    /// Held-out per-channel reconstruction MSE.
    pub mse: Vec<f64>,
    pub eeg_mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub with_iccl: AblationArm,
    pub without_iccl: AblationArm,
    /// Per channel: did the contrastive arm reach lower MSE?
    pub iccl_lower: Vec<bool>,
    pub iccl_lower_eeg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub channel_names: Vec<String>,
    pub eeg_channels: Vec<usize>,
    pub seeds: Vec<AblationSeed>,
    /// Seeds where the contrastive arm has the lower mean EEG-channel MSE.
    pub iccl_wins: usize,
}

/// Channels whose name mentions EEG; all channels if none do.
pub fn eeg_channels(names: &[String]) -> Vec<usize> {
    let found: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.to_uppercase().contains("EEG")).map(|(i, _)| i).collect();
    if found.is_empty() {
        (0..names.len()).collect()
    } else {
        found
    }
}

/// Pre-trains each seed twice, with and without the contrastive term, from
/// identical initialization, and compares held-out reconstruction error.
pub fn run_ablation<F: Scalar>(
    train: &EpochDataset<F>,
    val: &EpochDataset<F>,
    test: &EpochDataset<F>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let eeg = eeg_channels(&test.channel_names);
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let eval = ReconEvalOptions {
            recon_target: cfg.recon_target,
            mask_seed: derive_seed(seed, "ablation-eval"),
            batch_size: cfg.batch_size,
        };
        let arm = |iccl_enabled: bool| -> Result<AblationArm> {
            let arm_cfg = TrainConfig { seed, iccl_enabled, ..cfg.clone() };
            let (ck, log) = pretrain(train, val, model_cfg, &arm_cfg)?;
            let report = reconstruction_mse_report(&ck, test, &eval)?;
            let eeg_mean_mse = eeg.iter().map(|&c| report.mse[c]).sum::<f64>() / eeg.len() as f64;
            Ok(AblationArm {
                iccl_enabled,
                step0_total: log.steps.first().map(|s| s.total),
                best_step: log.best_step,
                mse: report.mse,
                eeg_mean_mse,
            })
        };
        let with_iccl = arm(true)?;
        let without_iccl = arm(false)?;
        let iccl_lower = with_iccl.mse.iter().zip(&without_iccl.mse).map(|(a, b)| a < b).collect();
        let iccl_lower_eeg = with_iccl.eeg_mean_mse < without_iccl.eeg_mean_mse;
        out.push(AblationSeed { seed, with_iccl, without_iccl, iccl_lower, iccl_lower_eeg });
    }
    Ok(AblationReport {
        channel_names: test.channel_names.clone(),
        eeg_channels: eeg,
        iccl_wins: out.iter().filter(|s| s.iccl_lower_eeg).count(),
        seeds: out,
    })
}
