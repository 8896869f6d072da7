use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::pretrain::{check_layout, layout};
use super::{BatchSampler, EarlyStop, FinetuneEval, FinetuneStep, RunLog, TrainConfig};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataio::{class_weights, EpochDataset, LabelMode};
use crate::error::{Error, Result};
use crate::evaluation::{argmax_rows, confusion, metrics, MetricReport};
use crate::model::{ClassObjective, ModelParams};
use crate::optim::{clip_global_norm, Optimizer};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Shape of the classification head attached for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    pub branch_kernels: Vec<usize>,
    pub channels: usize,
    pub dropout_rate: f64,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self { branch_kernels: vec![3, 5, 7], channels: 32, dropout_rate: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog<FinetuneStep, FinetuneEval>,
    /// Computed from the training subset.
    pub class_weights: Vec<f64>,
    /// Validation report of the returned checkpoint.
    pub validation: MetricReport,
}

/// Class probabilities for every epoch of `data`, no dropout.
pub fn predict<F: Scalar>(params: &ModelParams<F>, epochs: &[ArrayView2<F>], batch: usize) -> Result<Array2<F>> {
    let k = params.config.num_classes;
    let mut out = Array2::zeros((epochs.len(), k));
    let mut row = 0;
    for chunk in epochs.chunks(batch.max(1)) {
        let probs = params.classify_batch(chunk, None, None, None, false)?.probs;
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..]).assign(&probs);
        row += chunk.len();
    }
    Ok(out)
}

fn score<F: Scalar>(params: &ModelParams<F>, data: &EpochDataset<F>, labels: &[usize], batch: usize) -> Result<MetricReport> {
    let probs = predict(params, &data.views(), batch)?;
    metrics(&confusion(labels, &argmax_rows(probs.view()), params.config.num_classes)?)
}

/// Attaches a fresh head to a pre-trained encoder and trains on `task`
/// labels with inverse-frequency class weights. Keeps the parameters with
/// the best validation macro F1.
pub fn finetune<F: Scalar>(
    train: &EpochDataset<F>,
    val: &EpochDataset<F>,
    pretrained: &Checkpoint,
    task: LabelMode,
    head: &HeadSettings,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.center_mode != pretrained.meta.center_mode || val.center_mode != pretrained.meta.center_mode {
        return Err(Error::ConfigMismatch(format!(
            "data centering {:?} differs from the checkpoint's {:?}",
            train.center_mode, pretrained.meta.center_mode
        )));
    }
    let train_labels = train.categories(task)?;
    let val_labels = val.categories(task)?;
    if val.is_empty() {
        return Err(Error::TooFewEpochs { needed: 1, got: 0 });
    }
    let k = task.num_classes();
    let weights = class_weights(&train_labels, k)?;
    let objective = match task {
        LabelMode::Staging5 => ClassObjective::MultiClass { weights: weights.clone() },
        LabelMode::Osa2 => ClassObjective::Binary { positive_weight: weights[1] / weights[0] },
    };

    let started = Instant::now();
    let mut params: ModelParams<F> = pretrained.params_as();
    params.config.head_branch_kernels = head.branch_kernels.clone();
    params.config.head_channels = head.channels;
    params.config.dropout_rate = head.dropout_rate;
    params.attach_head(k, cfg.seed)?;
    check_layout(train, &params.config)?;
    check_layout(val, &params.config)?;

    let freeze = cfg.freeze_encoder;
    let trainable = |name: &str| name.starts_with("head.") || (!freeze && name.starts_with("encoder."));
    let mut optimizer = Optimizer::<F>::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(train.len(), rng_for(cfg.seed, "finetune-batches"));
    let mut dropout_rng = rng_for(cfg.seed, "finetune-dropout");
    let meta = |step: usize| CheckpointMeta {
        seed: cfg.seed,
        step,
        label_mode: Some(task),
        layout: Some(layout(train)),
        ..pretrained.meta.clone()
    };
    let snapshot = serde_json::json!({ "task": task, "head": head, "train": cfg, "class_weights": weights });
    let mut log = RunLog::new(snapshot);
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);

    let first = score(&params, val, &val_labels, cfg.batch_size)?;
    let mut best_f1 = first.macro_f1;
    let mut best_report = first.clone();
    let mut best = Checkpoint::from_params(&params, meta(0));
    log.best_step = Some(0);
    log.evaluations.push(FinetuneEval { step: 0, accuracy: first.accuracy, macro_f1: first.macro_f1, improved: true });

    let views = train.views();
    for step in 0..cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<ArrayView2<F>> = idx.iter().map(|&i| views[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let mut grads = params.zeros_like();
        let diverged = |best: &Checkpoint| Error::DivergenceDetected { step, last_good: Some(Box::new(best.clone())) };
        let out = match params.classify_batch(&batch, Some((&labels, &objective)), Some(&mut dropout_rng), Some(&mut grads), !freeze) {
            Ok(out) => out,
            Err(Error::NonFiniteActivation(_)) => return Err(diverged(&best)),
            Err(e) => return Err(e),
        };
        let loss = out.loss.expect("targets given");
        let (norm, clipped) = clip_global_norm(&mut grads, cfg.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(diverged(&best));
        }
        log.steps.push(FinetuneStep { step, loss, lr: cfg.optimizer.learning_rate, clipped });
        optimizer.step(&mut params, &grads, trainable);

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.max_steps {
            let report = score(&params, val, &val_labels, cfg.batch_size)?;
            let improved = report.macro_f1 > best_f1;
            if improved {
                best_f1 = report.macro_f1;
                best = Checkpoint::from_params(&params, meta(done));
                best_report = report.clone();
                log.best_step = Some(done);
            }
            log.evaluations.push(FinetuneEval { step: done, accuracy: report.accuracy, macro_f1: report.macro_f1, improved });
            if stopper.record(improved) {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(FinetuneOutcome { checkpoint: best, log, class_weights: weights, validation: best_report })
}
