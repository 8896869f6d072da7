use std::fs;
use std::path::{Path, PathBuf};

use psg_core::checkpoint::Checkpoint;
use psg_core::dataio::{
    generate_cohort, make_split, make_subject_folds, read_recording, write_recording, EpochDataset, LabelMode, Recording, Stage,
};
use psg_core::evaluation::{
    argmax_rows, confusion, cv_aggregate, feature_rows, metrics_named, reconstruct_epoch, reconstruction_mse_report,
    write_feature_csv, write_loss_csv, write_trace_csv, MetricReport, ReconEvalOptions, ReconReport,
};
use psg_core::masking::generate_mask_pair;
use psg_core::model::ModelConfig;
use psg_core::rng::derive_seed;
use psg_core::training::gradcheck::gradcheck;
use psg_core::training::{finetune, predict, pretrain, FinetuneStep, PretrainStep};
use psg_core::Error;
use serde::Serialize;

use crate::cli::{Cli, Command, ExportCommand};
use crate::config::ToolConfig;
use crate::failure::{Failure, EXIT_DIVERGED, EXIT_FAILURE};
use crate::rundir::RunDir;

const CHECKPOINT_FILE: &str = "checkpoint.psgc";
const RECORDING_EXT: &str = "psgr";

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = ToolConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let name = cli.command.name();
    match &cli.command {
        Command::GenData(a) => {
            a.apply(&mut cfg);
            gen_data(cfg, &a.out)
        }
        Command::Pretrain(a) => {
            a.apply(&mut cfg);
            run_pretrain(cfg, &a.out)
        }
        Command::Finetune(a) => {
            a.apply(&mut cfg);
            run_finetune(cfg, &a.out)
        }
        Command::Evaluate(a) => {
            a.apply(&mut cfg);
            evaluate(cfg, &a.out)
        }
        Command::Reconstruct(a) => {
            a.apply(&mut cfg);
            reconstruct(cfg, &a.out)
        }
        Command::Gradcheck(a) => run_gradcheck(cfg, a.out.as_deref()),
        Command::Export(ExportCommand::Loss(a)) => {
            a.apply(&mut cfg);
            export_loss(cfg, &a.out, name)
        }
        Command::Export(ExportCommand::Features(a)) => {
            a.apply(&mut cfg);
            export_features(cfg, &a.out, name)
        }
    }
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value.as_ref().ok_or_else(|| Failure::usage(format!("{flag} is required (flag, PSGTOOL_* variable or config file)")))
}

/// All `.psgr` recordings of `dir`, in file-name order.
fn load_recordings(dir: &Path) -> Result<Vec<Recording>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::input(format!("data directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == RECORDING_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::input(format!("no .{RECORDING_EXT} recordings in {}", dir.display())));
    }
    paths.iter().map(|p| read_recording(p).map_err(|e| Failure::from(e).context(p.display()))).collect()
}

/// Accepts either a checkpoint file or a run directory holding one.
fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(Failure::input(format!("checkpoint {} does not exist", file.display())));
    }
    Checkpoint::load(&file).map_err(|e| Failure::from(e).context(file.display()))
}

fn require_labels(recordings: &[Recording], task: LabelMode) -> Result<(), Failure> {
    for rec in recordings {
        if rec.label_mode != Some(task) {
            let found = rec.label_mode.map_or("no labels".to_string(), |m| format!("{m:?} labels"));
            return Err(Failure::mismatch(format!("recording {} has {found}, the task needs {task:?}", rec.subject_id)));
        }
    }
    Ok(())
}

fn category_names(task: LabelMode) -> Vec<&'static str> {
    match task {
        LabelMode::Staging5 => Stage::ALL.iter().map(|s| s.name()).collect(),
        LabelMode::Osa2 => vec!["normal", "osa"],
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    subject_id: String,
    channels: usize,
    epochs: usize,
}

fn gen_data(mut cfg: ToolConfig, out: &Path) -> Result<(), Failure> {
    cfg.synth.seed = cfg.seed;
    cfg.synth.validate()?;
    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, "gen-data")?;
    let recordings = generate_cohort(&cfg.synth, cfg.generate.subjects)?;
    let mut manifest = Vec::with_capacity(recordings.len());
    for rec in &recordings {
        let file = format!("{}.{RECORDING_EXT}", rec.subject_id);
        write_recording(rec, dir.file(&file))?;
        manifest.push(ManifestEntry { file, subject_id: rec.subject_id.clone(), channels: rec.channels(), epochs: rec.n_epochs() });
    }
    dir.write_json("manifest.json", &serde_json::json!({ "synth": cfg.synth, "recordings": manifest }))?;
    eprintln!("wrote {} recordings to {}", recordings.len(), out.display());
    Ok(())
}

/// Fits the model's channel count and subsegment length to the data.
fn fit_model(model: &mut ModelConfig, recordings: &[Recording]) -> Result<(), Failure> {
    let first = &recordings[0];
    let len = first.epoch_len();
    if model.n_patch == 0 || len % model.n_patch != 0 {
        return Err(Failure::usage(format!("n_patch {} does not divide the epoch length {len}", model.n_patch)));
    }
    model.c = first.channels();
    model.l_prime = len / model.n_patch;
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps_run: usize,
    best_step: Option<usize>,
    stopped_early: bool,
    train_epochs: usize,
    val_epochs: usize,
    test: Option<ReconReport>,
}

fn run_pretrain(mut cfg: ToolConfig, out: &Path) -> Result<(), Failure> {
    let recordings = load_recordings(required(&cfg.data.dir, "--data")?)?;
    fit_model(&mut cfg.model, &recordings)?;
    cfg.pretrain.seed = cfg.seed;
    cfg.pretrain.validate()?;
    cfg.model.validate()?;
    let [f_train, f_val, f_test] = cfg.data.fractions;
    let split = make_split(&recordings, (f_train, f_val, f_test), derive_seed(cfg.seed, "split"), cfg.data.split_unit)?;
    let load = |refs| EpochDataset::<f32>::select(&recordings, refs, cfg.data.center_mode);
    let (train, val, test) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);

    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, "pretrain")?;
    let (ck, log) = match pretrain(&train, &val, &cfg.model, &cfg.pretrain) {
        Ok(done) => done,
        Err(Error::DivergenceDetected { step, last_good }) => {
            if let Some(ck) = last_good {
                ck.save(dir.file(CHECKPOINT_FILE))?;
            }
            return Err(Failure::new(
                EXIT_DIVERGED,
                format!("training diverged at step {step}; last good checkpoint kept in {}", out.display()),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    ck.save(dir.file(CHECKPOINT_FILE))?;
    log.write_steps(dir.file("steps.ndjson"))?;
    log.write_evaluations(dir.file("evaluations.ndjson"))?;
    let test_report = if test.is_empty() {
        None
    } else {
        let opts = ReconEvalOptions { mask_seed: derive_seed(cfg.seed, "test-mask"), ..ReconEvalOptions::default() };
        Some(reconstruction_mse_report(&ck, &test, &opts)?)
    };
    if let Some(r) = &test_report {
        eprintln!("held-out reconstruction MSE {:.4} (predict-zero baseline {:.4})", r.mean_mse, r.mean_baseline);
    }
    eprintln!("best step {:?} of {}, {:.1}s", log.best_step, log.steps.len(), log.wall_clock_seconds);
    dir.write_json(
        "summary.json",
        &PretrainSummary {
            steps_run: log.steps.len(),
            best_step: log.best_step,
            stopped_early: log.stopped_early,
            train_epochs: train.len(),
            val_epochs: val.len(),
            test: test_report,
        },
    )
}

#[derive(Serialize)]
struct FoldReport {
    fold: usize,
    test_subjects: Vec<String>,
    best_step: Option<usize>,
    class_weights: Vec<f64>,
    validation: MetricReport,
    test: MetricReport,
}

fn run_finetune(mut cfg: ToolConfig, out: &Path) -> Result<(), Failure> {
    let task = *required(&cfg.finetune.task, "--task")?;
    let pretrained = load_checkpoint(required(&cfg.checkpoint, "--pretrained")?)?;
    let recordings = load_recordings(required(&cfg.data.dir, "--data")?)?;
    require_labels(&recordings, task)?;
    cfg.finetune.train.seed = cfg.seed;
    cfg.finetune.train.validate()?;
    let plan = make_subject_folds(&recordings, cfg.finetune.folds, derive_seed(cfg.seed, "folds"))?;
    let names = category_names(task);

    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, "finetune")?;
    let mut reports = Vec::with_capacity(plan.fold_count);
    for fold in 0..plan.fold_count {
        let split = plan.fold_split(&recordings, fold)?;
        let load = |refs| EpochDataset::<f32>::select(&recordings, refs, cfg.data.center_mode);
        let (train, val, test) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);
        let outcome = finetune(&train, &val, &pretrained, task, &cfg.finetune.head, &cfg.finetune.train)?;
        let probs = predict(&outcome.checkpoint.params_as::<f32>(), &test.views(), cfg.finetune.train.batch_size)?;
        let truth = test.categories(task)?;
        let test_report = metrics_named(&confusion(&truth, &argmax_rows(probs.view()), task.num_classes())?, &names)?;
        eprintln!(
            "fold {fold}: test accuracy {:.4}, macro F1 {:.4} (validation macro F1 {:.4})",
            test_report.accuracy, test_report.macro_f1, outcome.validation.macro_f1
        );

        let fold_dir = dir.file(&format!("fold-{fold}"));
        fs::create_dir_all(&fold_dir)?;
        outcome.checkpoint.save(fold_dir.join(CHECKPOINT_FILE))?;
        outcome.log.write_steps(fold_dir.join("steps.ndjson"))?;
        outcome.log.write_evaluations(fold_dir.join("evaluations.ndjson"))?;
        let report = FoldReport {
            fold,
            test_subjects: plan.fold_subjects(fold).into_iter().map(String::from).collect(),
            best_step: outcome.log.best_step,
            class_weights: outcome.class_weights,
            validation: outcome.validation,
            test: test_report,
        };
        fs::write(fold_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        reports.push(report.test);
    }
    let summary = cv_aggregate(&reports)?;
    eprintln!(
        "{} folds: accuracy {:.4} ± {:.4}, macro F1 {:.4} ± {:.4}",
        summary.folds, summary.accuracy.mean, summary.accuracy.std, summary.macro_f1.mean, summary.macro_f1.std
    );
    dir.write_json("cv_summary.json", &summary)
}

#[derive(Serialize)]
struct EvaluationReport {
    reconstruction: ReconReport,
    classification: Option<MetricReport>,
}

fn evaluate(cfg: ToolConfig, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(required(&cfg.checkpoint, "--checkpoint")?)?;
    let recordings = load_recordings(required(&cfg.data.dir, "--data")?)?;
    let data = EpochDataset::<f32>::from_recordings(&recordings, cfg.data.center_mode)?;
    let opts =
        ReconEvalOptions { recon_target: ck.meta.recon_target, mask_seed: cfg.evaluate.mask_seed, batch_size: cfg.evaluate.batch_size };
    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, "evaluate")?;
    let reconstruction = reconstruction_mse_report(&ck, &data, &opts)?;
    eprintln!("reconstruction MSE {:.4} (predict-zero baseline {:.4})", reconstruction.mean_mse, reconstruction.mean_baseline);

    let classification = match (ck.params.head.is_some(), ck.meta.label_mode) {
        (true, Some(task)) => {
            require_labels(&recordings, task)?;
            let probs = predict(&ck.params_as::<f32>(), &data.views(), cfg.evaluate.batch_size)?;
            let cm = confusion(&data.categories(task)?, &argmax_rows(probs.view()), task.num_classes())?;
            let report = metrics_named(&cm, &category_names(task))?;
            eprintln!("accuracy {:.4}, macro F1 {:.4}", report.accuracy, report.macro_f1);
            Some(report)
        }
        _ => None,
    };
    dir.write_json("report.json", &EvaluationReport { reconstruction, classification })
}

fn reconstruct(cfg: ToolConfig, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(required(&cfg.checkpoint, "--checkpoint")?)?;
    let recordings = load_recordings(required(&cfg.data.dir, "--data")?)?;
    let rc = &cfg.reconstruct;
    let rec = recordings
        .get(rc.recording)
        .ok_or_else(|| Failure::usage(format!("recording {} out of range ({} available)", rc.recording, recordings.len())))?;
    if rc.epoch_index >= rec.n_epochs() {
        return Err(Failure::usage(format!("epoch {} out of range ({} in {})", rc.epoch_index, rec.n_epochs(), rec.subject_id)));
    }
    if cfg.data.center_mode != ck.meta.center_mode {
        return Err(Failure::mismatch(format!(
            "data centering {:?} differs from the checkpoint's {:?}",
            cfg.data.center_mode, ck.meta.center_mode
        )));
    }
    let model = &ck.params.config;
    if rec.channels() != model.c || rec.epoch_len() != model.epoch_len() {
        return Err(Failure::mismatch(format!(
            "recording epochs are {}x{}, the checkpoint expects {}x{}",
            rec.channels(),
            rec.epoch_len(),
            model.c,
            model.epoch_len()
        )));
    }
    let data = EpochDataset::<f32>::from_recordings(std::slice::from_ref(rec), cfg.data.center_mode)?;
    let masks = generate_mask_pair(model.c, model.n_patch, rc.mask_seed)?;
    let epoch = data.epochs[rc.epoch_index].view();
    let recon = reconstruct_epoch(&ck.params, epoch, &masks, ck.meta.recon_target)?;
    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, "reconstruct")?;
    write_trace_csv(dir.file("trace.csv"), epoch, recon.view(), &rec.channel_names)?;
    eprintln!("wrote {} samples of epoch {} of {}", epoch.ncols(), rc.epoch_index, rec.subject_id);
    Ok(())
}

fn run_gradcheck(cfg: ToolConfig, out: Option<&Path>) -> Result<(), Failure> {
    let report = gradcheck(&ModelConfig::tiny(), cfg.seed)?;
    for c in &report.components {
        println!("{:<16} max relative error {:.3e}", c.component, c.max_rel_error);
    }
    if let Some(out) = out {
        let dir = RunDir::acquire(out)?;
        dir.snapshot(&cfg, "gradcheck")?;
        dir.write_json("gradcheck.json", &report)?;
    }
    if report.passed {
        println!("all gradients within {:.0e}", report.tolerance);
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILURE, format!("gradient check failed (tolerance {:.0e})", report.tolerance)))
    }
}

fn parse_steps<T: serde::de::DeserializeOwned>(text: &str) -> Option<Vec<T>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).ok()).collect()
}

fn export_loss(cfg: ToolConfig, out: &Path, command: &str) -> Result<(), Failure> {
    let run = required(&cfg.export.run, "--run")?;
    let path = run.join("steps.ndjson");
    let text = fs::read_to_string(&path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, command)?;
    let target = dir.file("loss.csv");
    if let Some(steps) = parse_steps::<PretrainStep>(&text) {
        write_loss_csv(target, &steps)?;
    } else if let Some(steps) = parse_steps::<FinetuneStep>(&text) {
        write_loss_csv(target, &steps)?;
    } else {
        return Err(Failure::input(format!("{} is not a psgtool step log", path.display())));
    }
    Ok(())
}

fn export_features(cfg: ToolConfig, out: &Path, command: &str) -> Result<(), Failure> {
    let ck = load_checkpoint(required(&cfg.checkpoint, "--checkpoint")?)?;
    let recordings = load_recordings(required(&cfg.data.dir, "--data")?)?;
    if cfg.data.center_mode != ck.meta.center_mode {
        return Err(Failure::mismatch(format!(
            "data centering {:?} differs from the checkpoint's {:?}",
            cfg.data.center_mode, ck.meta.center_mode
        )));
    }
    let data = EpochDataset::<f32>::from_recordings(&recordings, cfg.data.center_mode)?;
    let features = feature_rows(&ck.params, &data.views(), cfg.evaluate.batch_size)?;
    let mode = ck.meta.label_mode.or(recordings[0].label_mode);
    let labels: Vec<Option<String>> = data
        .labels
        .iter()
        .map(|label| {
            let (mode, label) = (mode?, label.as_ref()?);
            mode.category(label).map(|k| category_names(mode)[k].to_string())
        })
        .collect();
    let dir = RunDir::acquire(out)?;
    dir.snapshot(&cfg, command)?;
    write_feature_csv(dir.file("features.csv"), &labels, &features)?;
    Ok(())
}
