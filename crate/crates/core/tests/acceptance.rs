//! Acceptance criteria, one pass/fail line each.
//!
//! Runs as a plain binary. Name criteria to run a subset:
//! `cargo test --release -p psg-core --test acceptance -- masking metrics`

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use ndarray::{Array1, Array2};
use psg_core::checkpoint::{Checkpoint, CheckpointMeta};
use psg_core::dataio::{
    generate_cohort, make_split, make_subject_folds, read_recording, recording_bytes, recording_from_bytes,
    write_recording, EpochDataset, EpochLabel, LabelMode, Recording, SplitUnit, Stage, SynthConfig,
};
use psg_core::evaluation::{confusion, metrics, reconstruction_mse_report, ConfusionMatrix, ReconEvalOptions};
use psg_core::losses::{cosine_rows, iccl_rows, mse_rows, weighted_bce_loss, weighted_ce_loss, IcclConfig, ReconTarget};
use psg_core::masking::{apply_mask, generate_mask_pair, MaskSide};
use psg_core::model::{ModelConfig, ModelParams};
use psg_core::rng::derive_indexed;
use psg_core::signal::{CenterMode, EpochMatrix};
use psg_core::training::gradcheck::{gradcheck, GRADCHECK_TOLERANCE};
use psg_core::training::{finetune, pretrain, run_ablation, HeadSettings, TrainConfig};
use psg_core::Error;
use rand::Rng as _;

type Verdict = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// State shared between criteria so the expensive pre-training runs once.
#[derive(Default)]
struct Shared {
    pretrained: Option<Checkpoint>,
}

const COHORT_SEED: u64 = 7;
const COHORT_SUBJECTS: usize = 20;
const PRETRAIN_STEPS: usize = 2000;
const ABLATION_STEPS: usize = 500;
const FINETUNE_STEPS: usize = 600;

struct Cohort {
    train: EpochDataset<f32>,
    val: EpochDataset<f32>,
    test: EpochDataset<f32>,
}

fn pretraining_cohort() -> Cohort {
    let recordings = generate_cohort(&SynthConfig { seed: COHORT_SEED, ..SynthConfig::default() }, COHORT_SUBJECTS).unwrap();
    let split = make_split(&recordings, (0.8, 0.1, 0.1), 1, SplitUnit::Epoch).unwrap();
    let load = |refs| EpochDataset::<f32>::select(&recordings, refs, CenterMode::Median).unwrap();
    Cohort { train: load(&split.train), val: load(&split.val), test: load(&split.test) }
}

fn pretrain_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig { max_steps: steps, seed, early_stop_patience: None, ..TrainConfig::default() }
}

fn close(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

fn loss_oracles(_: &mut Shared) -> Verdict {
    let started = Instant::now();
    let mut instances = 0;
    let mut worst = [0.0f64; 5];
    let grid = [2usize, 5].into_iter().flat_map(|c| [2usize, 10].into_iter().flat_map(move |n| [4usize, 300].map(|lp| (c, n, lp))));
    for (g, (c, n, lp)) in grid.enumerate() {
        for i in 0..125u64 {
            let mut rng = seeded(derive_indexed(g as u64, "loss-oracle", i));
            let r = random_seg(&mut rng, n, c, lp);
            let x = random_seg(&mut rng, n, c, lp);
            let cells = if i % 2 == 0 {
                random_cells(&mut rng, n, c)
            } else {
                let vis = generate_mask_pair(c, n, rng.gen()).unwrap().visible(MaskSide::Hat);
                vis.outer_iter().map(|row| row.to_vec()).collect()
            };
            let (rr, xr, ca) = (from_seg(&r), from_seg(&x), cells_array(&cells));
            worst[0] = worst[0].max(close(cosine_rows(rr.view(), xr.view(), ca.view()).unwrap().value, cosine_oracle(&r, &x, &cells)));
            worst[1] = worst[1].max(close(mse_rows(rr.view(), xr.view(), ca.view()).unwrap().value, mse_oracle(&r, &x, &cells)));
            let alpha = rng.gen_range(0.0..4.0);
            let cl = iccl_rows(rr.view(), xr.view(), &IcclConfig::new(alpha).unwrap()).unwrap().value;
            worst[2] = worst[2].max(close(cl, iccl_oracle(&r, &x, alpha)));

            let k = c;
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..3.0)).collect();
            let pa = Array2::from_shape_fn((n, k), |(a, b)| probs[a][b]);
            let ce = weighted_ce_loss(pa.view(), &labels, &weights).unwrap().value;
            worst[3] = worst[3].max(close(ce, ce_oracle(&probs, &labels, &weights)));

            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let w_pos = rng.gen_range(0.5..4.0);
            let bce = weighted_bce_loss(Array1::from(p.clone()).view(), &y, w_pos).unwrap().value;
            worst[4] = worst[4].max(close(bce, bce_oracle(&p, &y, w_pos)));
            instances += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    verdict(
        max <= 1e-12 && secs < 60.0,
        format!(
            "{instances} instances, max |diff| cos {:.1e} mse {:.1e} cl {:.1e} ce {:.1e} bce {:.1e} (tol 1e-12), {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn gradients(_: &mut Shared) -> Verdict {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut all_passed = true;
    let mut components = 0;
    for seed in 0..3 {
        let report = gradcheck(&ModelConfig::tiny(), seed).map_err(|e| e.to_string())?;
        all_passed &= report.passed;
        worst = worst.max(report.max_rel_error());
        components += report.components.len();
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        all_passed && worst < GRADCHECK_TOLERANCE && secs < 300.0,
        format!("{components} component checks, max relative error {worst:.2e} (tol {GRADCHECK_TOLERANCE:.0e}), {secs:.1}s"),
    )
}

fn masking(_: &mut Shared) -> Verdict {
    let mut rng = seeded(404);
    let mut violations = 0usize;
    let total = 10_000;
    for _ in 0..total {
        let c = rng.gen_range(2..=9);
        let n = rng.gen_range(2..=30);
        let lp = rng.gen_range(1..=6);
        let pair = generate_mask_pair(c, n, rng.gen()).unwrap();
        let (hat, bar) = (pair.visible(MaskSide::Hat), pair.visible(MaskSide::Bar));
        if hat.iter().zip(bar.iter()).any(|(h, b)| h == b) {
            violations += 1;
        }
        if hat.outer_iter().any(|row| row.iter().filter(|&&v| v).count() != c / 2) {
            violations += 1;
        }
        let x = Array2::from_shape_fn((c, n * lp), |_| rng.gen_range(-10.0..10.0));
        let e = EpochMatrix::from_raw(x.clone()).unwrap();
        let m_hat = pair.expand::<f64>(MaskSide::Hat, lp);
        let m_bar = pair.expand::<f64>(MaskSide::Bar, lp);
        let sum = apply_mask(&e, m_hat.view()).unwrap().into_data() + apply_mask(&e, m_bar.view()).unwrap().into_data();
        if sum != x || (&m_hat + &m_bar).iter().any(|&v| v != 1.0) {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("{total} mask pairs, {violations} violations"))
}

fn random_recording(rng: &mut psg_core::rng::Rng, index: usize) -> Recording {
    let c = rng.gen_range(1..=6);
    let hz = rng.gen_range(1..=64);
    let secs = rng.gen_range(1..=5);
    let epochs = rng.gen_range(1..=6);
    let samples = Array2::from_shape_fn((c, hz * secs * epochs), |_| rng.gen_range(-500.0f32..500.0));
    let mode = [None, Some(LabelMode::Staging5), Some(LabelMode::Osa2)][index % 3];
    let labels = mode.map(|_| {
        (0..epochs)
            .map(|_| {
                let stage = rng.gen_bool(0.8).then(|| Stage::from_index(rng.gen_range(0..5)).unwrap());
                let osa = (stage.is_none() || rng.gen_bool(0.8)).then(|| rng.gen_bool(0.3));
                EpochLabel { stage, osa }
            })
            .collect()
    });
    let names = (0..c).map(|i| format!("ch-{i}")).collect();
    Recording::new(format!("subject-{index}"), names, hz, secs, samples, mode, labels).unwrap()
}

fn random_checkpoint(rng: &mut psg_core::rng::Rng, index: usize) -> Checkpoint {
    let mut cfg = ModelConfig::tiny();
    cfg.c = rng.gen_range(2..=5);
    cfg.n_patch = rng.gen_range(2..=6);
    cfg.d_model = 4 * rng.gen_range(1..=3);
    cfg.attention_heads = [1, 2, 4][rng.gen_range(0..3)];
    let params = ModelParams::<f32>::init(cfg, rng.gen(), index % 2 == 0).unwrap();
    let meta = CheckpointMeta {
        seed: rng.gen(),
        step: rng.gen_range(0..5000),
        center_mode: if index % 3 == 0 { CenterMode::Mean } else { CenterMode::Median },
        recon_target: ReconTarget::Visible,
        iccl: IcclConfig::new(rng.gen_range(0.0..2.0)).unwrap(),
        iccl_enabled: index % 4 != 0,
        label_mode: (index % 2 == 0).then_some(LabelMode::Osa2),
        layout: None,
    };
    Checkpoint::from_params(&params, meta)
}

fn serialization(_: &mut Shared) -> Verdict {
    let mut rng = seeded(505);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut mismatches = 0;
    let mut blobs: Vec<(bool, Vec<u8>)> = Vec::new();
    for i in 0..500 {
        let rec = random_recording(&mut rng, i);
        let bytes = recording_bytes(&rec);
        let back = recording_from_bytes(&bytes).map_err(|e| e.to_string())?;
        if back != rec || recording_bytes(&back) != bytes {
            mismatches += 1;
        }
        if i % 25 == 0 {
            let path = dir.path().join(format!("r{i}.psgr"));
            write_recording(&rec, &path).map_err(|e| e.to_string())?;
            if read_recording(&path).map_err(|e| e.to_string())? != rec {
                mismatches += 1;
            }
        }
        blobs.push((false, bytes));
    }
    for i in 0..20 {
        let ck = random_checkpoint(&mut rng, i);
        let bytes = ck.to_bytes();
        let path = dir.path().join(format!("c{i}.psgc"));
        ck.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        if back != ck || back.to_bytes() != bytes {
            mismatches += 1;
        }
        blobs.push((true, bytes));
    }

    let mut silent = 0;
    let mut other_errors = 0;
    for m in 0..1000 {
        let (is_checkpoint, original) = &blobs[if m % 4 == 0 { 500 + m % 20 } else { rng.gen_range(0..500) }];
        let mut bytes = original.clone();
        match m % 5 {
            0 => {
                let at = rng.gen_range(0..bytes.len());
                bytes[at] ^= rng.gen_range(1..=255u8);
            }
            1 => bytes.truncate(rng.gen_range(0..bytes.len())),
            2 => bytes.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
            3 => {
                bytes.remove(rng.gen_range(0..bytes.len()));
            }
            _ => {
                let at = rng.gen_range(0..bytes.len());
                let end = (at + rng.gen_range(1..=4)).min(bytes.len());
                for b in &mut bytes[at..end] {
                    *b = rng.gen();
                }
                if bytes == *original {
                    bytes[at] ^= 0x5A;
                }
            }
        }
        let result = if *is_checkpoint { Checkpoint::from_bytes(&bytes).err() } else { recording_from_bytes(&bytes).err() };
        match result {
            None => silent += 1,
            Some(Error::FormatViolation { .. } | Error::ChecksumMismatch { .. }) => {}
            Some(_) => other_errors += 1,
        }
    }
    verdict(
        mismatches == 0 && silent == 0 && other_errors == 0,
        format!(
            "500 recordings + 20 checkpoints, {mismatches} round-trip mismatches; 1000 mutations, {silent} silent, {other_errors} wrong error kind"
        ),
    )
}

fn convergence(shared: &mut Shared) -> Verdict {
    let started = Instant::now();
    let cohort = pretraining_cohort();
    let cfg = pretrain_config(1, PRETRAIN_STEPS);
    let run = || pretrain(&cohort.train, &cohort.val, &ModelConfig::default(), &cfg).map_err(|e| e.to_string());
    let (ck, log) = run()?;
    let report = reconstruction_mse_report(&ck, &cohort.test, &ReconEvalOptions::default()).map_err(|e| e.to_string())?;
    let first = started.elapsed().as_secs_f64();
    let (ck2, log2) = run()?;
    let identical = log.steps_ndjson() == log2.steps_ndjson()
        && log.evaluations_ndjson() == log2.evaluations_ndjson()
        && ck.to_bytes() == ck2.to_bytes();
    shared.pretrained = Some(ck);
    let ok = report.mean_mse < 0.2 && (0.9..=1.1).contains(&report.mean_baseline) && identical && first <= 900.0;
    verdict(
        ok,
        format!(
            "held-out MSE {:.4} vs predict-zero baseline {:.4} (need < 0.2), rerun log identical: {identical}, {first:.0}s per run",
            report.mean_mse, report.mean_baseline
        ),
    )
}

fn ablation(_: &mut Shared) -> Verdict {
    let cohort = pretraining_cohort();
    let cfg = pretrain_config(0, ABLATION_STEPS);
    let report =
        run_ablation(&cohort.train, &cohort.val, &cohort.test, &ModelConfig::default(), &cfg, &[1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
    let pairs: Vec<String> = report
        .seeds
        .iter()
        .map(|s| format!("{}:{:.4}/{:.4}", s.seed, s.with_iccl.eeg_mean_mse, s.without_iccl.eeg_mean_mse))
        .collect();
    verdict(
        report.iccl_wins >= 3,
        format!(
            "EEG-channel MSE with/without contrastive term {} ({ABLATION_STEPS} steps), lower in {}/5 seeds (need >= 3)",
            pairs.join(" "),
            report.iccl_wins
        ),
    )
}

/// Macro F1 of always predicting the more frequent class: that class scores
/// F1 = 2p / (1 + p), the other 0.
fn majority_macro_f1(labels: &[usize]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
    let p = positives.max(labels.len() as f64 - positives) / labels.len() as f64;
    p / (1.0 + p)
}

fn downstream(shared: &mut Shared) -> Verdict {
    let pretrained = match shared.pretrained.clone() {
        Some(ck) => ck,
        None => {
            let cohort = pretraining_cohort();
            pretrain(&cohort.train, &cohort.val, &ModelConfig::default(), &pretrain_config(1, PRETRAIN_STEPS))
                .map_err(|e| e.to_string())?
                .0
        }
    };
    let mut results = Vec::new();
    for task in [LabelMode::Staging5, LabelMode::Osa2] {
        let recordings =
            generate_cohort(&SynthConfig { seed: 21, label_mode: task, ..SynthConfig::default() }, 10).map_err(|e| e.to_string())?;
        let plan = make_subject_folds(&recordings, 5, 0).map_err(|e| e.to_string())?;
        let split = plan.fold_split(&recordings, 0).map_err(|e| e.to_string())?;
        let load = |refs| EpochDataset::<f32>::select(&recordings, refs, CenterMode::Median);
        let (train, val) = (load(&split.train).map_err(|e| e.to_string())?, load(&split.val).map_err(|e| e.to_string())?);
        let cfg = TrainConfig { max_steps: FINETUNE_STEPS, checkpoint_every: 50, ..TrainConfig::default() };
        let out = finetune(&train, &val, &pretrained, task, &HeadSettings::default(), &cfg).map_err(|e| e.to_string())?;
        let labels = val.categories(task).map_err(|e| e.to_string())?;
        results.push((task, out.validation, labels));
    }
    let (_, staging, _) = &results[0];
    let (_, osa, osa_labels) = &results[1];
    let majority = majority_macro_f1(osa_labels);
    let majority_class = usize::from(osa_labels.iter().filter(|&&y| y == 1).count() * 2 > osa_labels.len());
    let brute = metrics(&confusion(osa_labels, &vec![majority_class; osa_labels.len()], 2).unwrap()).unwrap().macro_f1;
    let ok = staging.accuracy >= 0.95 && osa.macro_f1 >= 0.85 && osa.macro_f1 > majority && close(brute, majority) < 1e-12;
    verdict(
        ok,
        format!(
            "staging val accuracy {:.4} (need >= 0.95, chance 0.2); OSA val MF1 {:.4} (need >= 0.85) vs always-majority {:.4}",
            staging.accuracy, osa.macro_f1, majority
        ),
    )
}

fn metrics_suite(_: &mut Shared) -> Verdict {
    let mut rng = seeded(808);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=200);
        // Skewed draws leave some categories empty in truth or prediction.
        let skew = rng.gen_range(1..=k);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..skew)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let cm = confusion(&truth, &pred, k).unwrap();
        let tally = tally_oracle(&truth, &pred, k);
        let counts: Vec<Vec<u64>> = cm.counts().outer_iter().map(|r| r.to_vec()).collect();
        if counts != tally {
            mismatches += 1;
            continue;
        }
        let report = metrics(&cm).unwrap();
        let (acc, cats, mf1) = metric_oracle(&tally);
        let cats_match =
            report.categories.iter().zip(&cats).all(|(got, (p, r, f))| got.precision == *p && got.recall == *r && got.f1 == *f);
        if report.accuracy != acc || report.macro_f1 != mf1 || !cats_match {
            mismatches += 1;
        }
    }
    let hand = metrics(&ConfusionMatrix::from_counts(Array2::from_shape_vec((2, 2), vec![1, 1, 0, 2]).unwrap()).unwrap()).unwrap();
    let hand_ok = close(hand.accuracy, 0.75) < 1e-9 && close(hand.macro_f1, 0.7333333333333333) < 1e-9;
    verdict(
        mismatches == 0 && hand_ok,
        format!(
            "1000 instances, {mismatches} mismatches; [[1,1],[0,2]] ACC {:.4} MF1 {:.4}",
            hand.accuracy, hand.macro_f1
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn(&mut Shared) -> Verdict); 8] = [
        ("loss_oracles", loss_oracles),
        ("gradients", gradients),
        ("masking", masking),
        ("serialization", serialization),
        ("convergence", convergence),
        ("ablation", ablation),
        ("downstream", downstream),
        ("metrics", metrics_suite),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut shared = Shared::default();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
