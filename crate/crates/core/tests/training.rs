use psg_core::checkpoint::Checkpoint;
use psg_core::dataio::{class_weights, generate_cohort, make_split, EpochDataset, LabelMode, Recording, SplitUnit, SynthConfig};
use psg_core::evaluation::{reconstruction_mse_report, ReconEvalOptions};
use psg_core::model::{ModelConfig, ModelParams};
use psg_core::signal::CenterMode;
use psg_core::training::{finetune, pretrain, HeadSettings, TrainConfig};
use psg_core::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        c: 5,
        n_patch: 4,
        l_prime: 50,
        d_model: 16,
        encoder_layers: 1,
        attention_heads: 2,
        feedforward_dim: 32,
        decoder_hidden: 32,
        head_channels: 8,
        ..ModelConfig::default()
    }
}

fn cohort(mode: LabelMode) -> Vec<Recording> {
    let cfg = SynthConfig { epoch_seconds: 2, epoch_count: 40, label_mode: mode, seed: 3, ..SynthConfig::default() };
    generate_cohort(&cfg, 3).unwrap()
}

fn datasets(recs: &[Recording]) -> (EpochDataset<f32>, EpochDataset<f32>) {
    let split = make_split(recs, (0.8, 0.2, 0.0), 5, SplitUnit::Epoch).unwrap();
    let load = |refs| EpochDataset::<f32>::select(recs, refs, CenterMode::Median).unwrap();
    (load(&split.train), load(&split.val))
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig { max_steps: steps, batch_size: 8, checkpoint_every: 5, seed: 9, ..TrainConfig::default() }
}

fn pretrained() -> Checkpoint {
    let (train, val) = datasets(&cohort(LabelMode::Osa2));
    pretrain(&train, &val, &small_model(), &short(10)).unwrap().0
}

#[test]
fn zero_steps_returns_initial_parameters() {
    let (train, val) = datasets(&cohort(LabelMode::Osa2));
    let (ck, log) = pretrain(&train, &val, &small_model(), &short(0)).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(log.evaluations.len(), 1);
    assert_eq!(log.best_step, Some(0));
    let mut model = small_model();
    model.dropout_rate = ck.params.config.dropout_rate;
    assert_eq!(ck.meta.step, 0);
    assert_eq!(ck.params.param_count(), ModelParams::<f32>::init(model, 0, false).unwrap().param_count());
}

#[test]
fn pretraining_is_deterministic() {
    let (train, val) = datasets(&cohort(LabelMode::Osa2));
    let a = pretrain(&train, &val, &small_model(), &short(12)).unwrap();
    let b = pretrain(&train, &val, &small_model(), &short(12)).unwrap();
    assert_eq!(a.1.steps_ndjson(), b.1.steps_ndjson());
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    let c = pretrain(&train, &val, &small_model(), &TrainConfig { seed: 10, ..short(12) }).unwrap();
    assert_ne!(a.1.steps_ndjson(), c.1.steps_ndjson());
}

#[test]
fn early_stop_follows_improvement_record() {
    let (train, val) = datasets(&cohort(LabelMode::Osa2));
    let cfg = TrainConfig { early_stop_patience: Some(1), checkpoint_every: 1, ..short(200) };
    let (ck, log) = pretrain(&train, &val, &small_model(), &cfg).unwrap();
    let last_improved = log.evaluations.iter().rev().find(|e| e.improved).unwrap();
    assert_eq!(log.best_step, Some(last_improved.step));
    assert_eq!(ck.meta.step, last_improved.step);
    if log.stopped_early {
        assert!(!log.evaluations.last().unwrap().improved);
        assert!(log.steps.len() < 200);
    }
    let best = log.evaluations.iter().map(|e| e.objective).fold(f64::INFINITY, f64::min);
    assert_eq!(last_improved.objective, best);
}

#[test]
fn layout_mismatch_is_rejected() {
    let (train, val) = datasets(&cohort(LabelMode::Osa2));
    let wrong = ModelConfig { n_patch: 5, l_prime: 50, ..small_model() };
    assert!(pretrain(&train, &val, &wrong, &short(1)).is_err());
}

#[test]
fn held_out_report_checks_centering() {
    let recs = cohort(LabelMode::Osa2);
    let ck = pretrained();
    let mean_centered = EpochDataset::<f32>::from_recordings(&recs, CenterMode::Mean).unwrap();
    let err = reconstruction_mse_report(&ck, &mean_centered, &ReconEvalOptions::default()).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)));
}

#[test]
fn frozen_encoder_is_left_untouched() {
    let ck = pretrained();
    let (train, val) = datasets(&cohort(LabelMode::Staging5));
    let cfg = TrainConfig { freeze_encoder: true, ..short(10) };
    let out = finetune(&train, &val, &ck, LabelMode::Staging5, &HeadSettings::default(), &cfg).unwrap();
    let before: Vec<_> = ck.params.named_tensors().into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect();
    let after: Vec<_> = out.checkpoint.params.named_tensors().into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect();
    assert!(!before.is_empty());
    assert_eq!(before, after);
}

#[test]
fn class_weights_come_from_training_labels() {
    let ck = pretrained();
    let (train, val) = datasets(&cohort(LabelMode::Staging5));
    let out = finetune(&train, &val, &ck, LabelMode::Staging5, &HeadSettings::default(), &short(2)).unwrap();
    let expected = class_weights(&train.categories(LabelMode::Staging5).unwrap(), 5).unwrap();
    assert_eq!(out.class_weights, expected);
    let val_weights = class_weights(&val.categories(LabelMode::Staging5).unwrap(), 5);
    assert!(val_weights.map_or(true, |w| w != expected));
}

#[test]
fn best_finetune_checkpoint_has_best_macro_f1() {
    let ck = pretrained();
    let (train, val) = datasets(&cohort(LabelMode::Osa2));
    let out = finetune(&train, &val, &ck, LabelMode::Osa2, &HeadSettings::default(), &short(20)).unwrap();
    let best = out.log.evaluations.iter().map(|e| e.macro_f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.validation.macro_f1, best);
    assert_eq!(out.checkpoint.meta.label_mode, Some(LabelMode::Osa2));
    assert_eq!(out.checkpoint.params.config.num_classes, 2);
}
