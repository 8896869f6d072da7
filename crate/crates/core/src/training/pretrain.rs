use std::time::Instant;

use ndarray::ArrayView2;

use super::{BatchSampler, EarlyStop, PretrainEval, PretrainStep, RunLog, TrainConfig};
use crate::checkpoint::{Checkpoint, CheckpointMeta, DataLayout};
use crate::dataio::EpochDataset;
use crate::error::{Error, Result};
use crate::evaluation::accumulate_cell_errors;
use crate::losses::LossBreakdown;
use crate::masking::{generate_mask_pair, generate_mask_pair_with, MaskPair};
use crate::model::{epoch_rows, LossWeights, ModelConfig, ModelParams, PretrainObjective};
use crate::optim::{clip_global_norm, Optimizer};
use crate::rng::{derive_indexed, rng_for};
use crate::scalar::Scalar;

pub(crate) fn check_layout<F: Scalar>(data: &EpochDataset<F>, cfg: &ModelConfig) -> Result<()> {
    if data.channels() != cfg.c || data.epoch_len() != cfg.epoch_len() {
        return Err(Error::ShapeMismatch(format!(
            "data epochs are ({}, {}), model expects ({}, {} x {})",
            data.channels(),
            data.epoch_len(),
            cfg.c,
            cfg.n_patch,
            cfg.l_prime
        )));
    }
    Ok(())
}

pub(crate) fn layout<F>(data: &EpochDataset<F>) -> DataLayout {
    DataLayout {
        channel_names: data.channel_names.clone(),
        sampling_hz: data.sampling_hz,
        epoch_seconds: data.epoch_seconds,
    }
}

struct ValidationSet<'a, F> {
    views: Vec<ArrayView2<'a, F>>,
    masks: Vec<MaskPair>,
}

fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    val: &ValidationSet<'_, F>,
    objective: &PretrainObjective,
    batch: usize,
    step: usize,
) -> Result<PretrainEval> {
    let cfg = &params.config;
    let n = val.views.len();
    let mut obj = 0.0;
    let mut breakdowns: Vec<LossBreakdown> = Vec::with_capacity(n);
    let mut sums = vec![0.0; cfg.c];
    let mut counts = vec![0u64; cfg.c];
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let out = params.pretrain_batch(&val.views[start..end], &val.masks[start..end], objective, None, None)?;
        obj += out.objective * (end - start) as f64;
        for (b, i) in (start..end).enumerate() {
            let target = epoch_rows(val.views[i], cfg.n_patch);
            accumulate_cell_errors(
                target.view(),
                out.recon_hat[b].view(),
                out.recon_bar[b].view(),
                &val.masks[i],
                objective.recon_target,
                &mut sums,
                &mut counts,
            );
        }
        breakdowns.extend(out.breakdowns);
    }
    let mean = LossBreakdown::mean(&breakdowns);
    Ok(PretrainEval {
        step,
        objective: obj / n as f64,
        total: mean.total,
        l_recon: mean.l_recon,
        l_cl: mean.l_cl,
        per_channel_mse: sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect(),
        improved: false,
    })
}

/// Trains encoder and decoder on complementary-mask reconstruction.
///
/// Returns the parameters with the lowest validation objective seen (the
/// initial parameters count as the step-0 candidate) and the run log.
pub fn pretrain<F: Scalar>(
    train: &EpochDataset<F>,
    val: &EpochDataset<F>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunLog<PretrainStep, PretrainEval>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_layout(train, model_cfg)?;
    check_layout(val, model_cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::TooFewEpochs { needed: 1, got: train.len().min(val.len()) });
    }
    if val.center_mode != train.center_mode {
        return Err(Error::ConfigMismatch("train and validation sets use different centering".into()));
    }
    let started = Instant::now();
    let (c, n_patch) = (model_cfg.c, model_cfg.n_patch);
    let objective = PretrainObjective { recon_target: cfg.recon_target, iccl: cfg.iccl, weights: LossWeights::default() }
        .with_iccl(cfg.iccl_enabled);

    let mut params = ModelParams::<F>::init(model_cfg.clone(), cfg.seed, false)?;
    let mut optimizer = Optimizer::<F>::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(train.len(), rng_for(cfg.seed, "batches"));
    let mut mask_rng = rng_for(cfg.seed, "masks");
    let mut dropout_rng = rng_for(cfg.seed, "dropout");
    let fixed_masks: Vec<MaskPair> = if cfg.fresh_masks {
        Vec::new()
    } else {
        (0..train.len())
            .map(|i| generate_mask_pair(c, n_patch, derive_indexed(cfg.seed, "train-mask", i as u64)))
            .collect::<Result<_>>()?
    };
    let validation = ValidationSet {
        views: val.views(),
        masks: (0..val.len())
            .map(|i| generate_mask_pair(c, n_patch, derive_indexed(cfg.seed, "val-mask", i as u64)))
            .collect::<Result<_>>()?,
    };

    let meta = |step: usize| CheckpointMeta {
        seed: cfg.seed,
        step,
        center_mode: train.center_mode,
        recon_target: cfg.recon_target,
        iccl: cfg.iccl,
        iccl_enabled: cfg.iccl_enabled,
        label_mode: None,
        layout: Some(layout(train)),
    };
    let snapshot = serde_json::json!({ "model": model_cfg, "train": cfg });
    let mut log = RunLog::new(snapshot);
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);

    let mut first = evaluate(&params, &validation, &objective, cfg.batch_size, 0)?;
    first.improved = true;
    let mut best_score = first.objective;
    let mut best = Checkpoint::from_params(&params, meta(0));
    log.best_step = Some(0);
    log.evaluations.push(first);

    let views = train.views();
    for step in 0..cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<ArrayView2<F>> = idx.iter().map(|&i| views[i]).collect();
        let masks: Vec<MaskPair> = if cfg.fresh_masks {
            idx.iter().map(|_| generate_mask_pair_with(c, n_patch, &mut mask_rng)).collect::<Result<_>>()?
        } else {
            idx.iter().map(|&i| fixed_masks[i].clone()).collect()
        };
        let mut grads = params.zeros_like();
        let diverged = |best: &Checkpoint| Error::DivergenceDetected { step, last_good: Some(Box::new(best.clone())) };
        let out = match params.pretrain_batch(&batch, &masks, &objective, Some(&mut dropout_rng), Some(&mut grads)) {
            Ok(out) => out,
            Err(Error::NonFiniteActivation(_)) => return Err(diverged(&best)),
            Err(e) => return Err(e),
        };
        let (norm, clipped) = clip_global_norm(&mut grads, cfg.clip_norm);
        if !out.objective.is_finite() || !norm.is_finite() {
            return Err(diverged(&best));
        }
        let mean = LossBreakdown::mean(&out.breakdowns);
        log.steps.push(PretrainStep {
            step,
            l_cos: mean.l_cos,
            l_mse: mean.l_mse,
            l_recon: mean.l_recon,
            l_cl: mean.l_cl,
            total: mean.total,
            lr: cfg.optimizer.learning_rate,
            clipped,
        });
        optimizer.step(&mut params, &grads, |_| true);

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.max_steps {
            let mut eval = evaluate(&params, &validation, &objective, cfg.batch_size, done)?;
            if !eval.objective.is_finite() {
                return Err(Error::DivergenceDetected { step: done, last_good: Some(Box::new(best)) });
            }
            eval.improved = eval.objective < best_score;
            if eval.improved {
                best_score = eval.objective;
                best = Checkpoint::from_params(&params, meta(done));
                log.best_step = Some(done);
            }
            let stop = stopper.record(eval.improved);
            log.evaluations.push(eval);
            if stop {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((best, log))
}
