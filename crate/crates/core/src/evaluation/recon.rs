use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::EpochDataset;
use crate::error::{Error, Result};
use crate::losses::ReconTarget;
use crate::masking::{generate_mask_pair, MaskPair, MaskSide};
use crate::model::{rows_epoch, ModelParams, PretrainObjective};
use crate::rng::derive_indexed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconEvalOptions {
    pub recon_target: ReconTarget,
    /// Masks for epoch `i` come from `derive_indexed(mask_seed, "eval-mask", i)`.
    pub mask_seed: u64,
    pub batch_size: usize,
}

impl Default for ReconEvalOptions {
    fn default() -> Self {
        Self { recon_target: ReconTarget::Visible, mask_seed: 0, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub channel_names: Vec<String>,
    pub recon_target: ReconTarget,
    pub epochs: usize,
    pub mse: Vec<f64>,
    /// MSE of an all-zero reconstruction over the same cells.
    pub baseline: Vec<f64>,
    pub mean_mse: f64,
    pub mean_baseline: f64,
}

/// Adds squared errors of the scored cells of both views, per channel.
/// Rows are `(n_patch, C * L')` token rows.
pub fn accumulate_cell_errors<F: Scalar>(
    target: ArrayView2<F>,
    recon_hat: ArrayView2<F>,
    recon_bar: ArrayView2<F>,
    masks: &MaskPair,
    recon_target: ReconTarget,
    sums: &mut [f64],
    counts: &mut [u64],
) {
    let channels = masks.channels();
    let lp = target.ncols() / channels;
    for (side, recon) in [(MaskSide::Hat, recon_hat), (MaskSide::Bar, recon_bar)] {
        let cells = recon_target.cells(&masks.visible(side));
        for ((i, c), &scored) in cells.indexed_iter() {
            if !scored {
                continue;
            }
            let cols = c * lp..(c + 1) * lp;
            let t = target.slice(s![i, cols.clone()]);
            let r = recon.slice(s![i, cols]);
            sums[c] += t.iter().zip(r.iter()).map(|(a, b)| (*a - *b).to_f64_lossy().powi(2)).sum::<f64>();
            counts[c] += lp as u64;
        }
    }
}

fn eval_masks(n: usize, channels: usize, n_patch: usize, seed: u64) -> Result<Vec<MaskPair>> {
    (0..n).map(|i| generate_mask_pair(channels, n_patch, derive_indexed(seed, "eval-mask", i as u64))).collect()
}

/// Per-channel reconstruction MSE of `ck` over every epoch of `data`.
pub fn reconstruction_mse_report<F: Scalar>(
    ck: &Checkpoint,
    data: &EpochDataset<F>,
    opts: &ReconEvalOptions,
) -> Result<ReconReport> {
    if data.center_mode != ck.meta.center_mode {
        return Err(Error::ConfigMismatch(format!(
            "data normalized with {:?} centering, checkpoint trained with {:?}",
            data.center_mode, ck.meta.center_mode
        )));
    }
    if opts.recon_target != ck.meta.recon_target {
        return Err(Error::ConfigMismatch(format!(
            "evaluating {:?} cells, checkpoint trained on {:?}",
            opts.recon_target, ck.meta.recon_target
        )));
    }
    let cfg = &ck.params.config;
    if data.channels() != cfg.c || data.epoch_len() != cfg.epoch_len() {
        return Err(Error::ConfigMismatch(format!(
            "data epochs are ({}, {}), model expects ({}, {})",
            data.channels(),
            data.epoch_len(),
            cfg.c,
            cfg.epoch_len()
        )));
    }
    if data.is_empty() {
        return Err(Error::TooFewEpochs { needed: 1, got: 0 });
    }
    let params: ModelParams<F> = ck.params_as();
    let masks = eval_masks(data.len(), cfg.c, cfg.n_patch, opts.mask_seed)?;
    let objective = PretrainObjective { recon_target: opts.recon_target, iccl: ck.meta.iccl, ..Default::default() };
    let mut sums = vec![0.0; cfg.c];
    let mut zero_sums = vec![0.0; cfg.c];
    let mut counts = vec![0u64; cfg.c];
    let mut zero_counts = vec![0u64; cfg.c];
    let views = data.views();
    let batch = opts.batch_size.max(1);
    for start in (0..data.len()).step_by(batch) {
        let end = (start + batch).min(data.len());
        let out = params.pretrain_batch(&views[start..end], &masks[start..end], &objective, None, None)?;
        for (b, i) in (start..end).enumerate() {
            let target = crate::model::epoch_rows(views[i], cfg.n_patch);
            accumulate_cell_errors(
                target.view(),
                out.recon_hat[b].view(),
                out.recon_bar[b].view(),
                &masks[i],
                opts.recon_target,
                &mut sums,
                &mut counts,
            );
            let zero = Array2::<F>::zeros(target.dim());
            accumulate_cell_errors(
                target.view(),
                zero.view(),
                zero.view(),
                &masks[i],
                opts.recon_target,
                &mut zero_sums,
                &mut zero_counts,
            );
        }
    }
    let per = |s: &[f64], n: &[u64]| -> Vec<f64> { s.iter().zip(n).map(|(s, &n)| s / n.max(1) as f64).collect() };
    let mse = per(&sums, &counts);
    let baseline = per(&zero_sums, &zero_counts);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ReconReport {
        channel_names: data.channel_names.clone(),
        recon_target: opts.recon_target,
        epochs: data.len(),
        mean_mse: mean(&mse),
        mean_baseline: mean(&baseline),
        mse,
        baseline,
    })
}

/// `(C, L)` reconstruction of one epoch; each cell is taken from the view
/// that scores it (the view it is visible in, or hidden in for
/// [`ReconTarget::Hidden`]).
pub fn reconstruct_epoch<F: Scalar>(
    params: &ModelParams<F>,
    epoch: ArrayView2<F>,
    masks: &MaskPair,
    recon_target: ReconTarget,
) -> Result<Array2<F>> {
    let out = params.pretrain_batch(&[epoch], std::slice::from_ref(masks), &PretrainObjective::default(), None, None)?;
    let c = params.config.c;
    let lp = params.config.l_prime;
    let hat_visible = masks.visible(MaskSide::Hat);
    let mut rows = out.recon_bar[0].clone();
    for ((i, ch), &vis) in hat_visible.indexed_iter() {
        if vis != (recon_target == ReconTarget::Hidden) {
            rows.slice_mut(s![i, ch * lp..(ch + 1) * lp]).assign(&out.recon_hat[0].slice(s![i, ch * lp..(ch + 1) * lp]));
        }
    }
    Ok(rows_epoch(rows.view(), c))
}
