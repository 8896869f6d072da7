use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use psg_core::checkpoint::Checkpoint;

fn psgtool(args: &[&str]) -> Output {
    psgtool_env(args, &[])
}

fn psgtool_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_psgtool"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("PSGTOOL_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, mode: &str, seed: &str) -> PathBuf {
    let data = dir.join(format!("data-{mode}-{seed}"));
    ok(psgtool(&["gen-data", "--subjects", "5", "--epochs", "12", "--mode", mode, "--seed", seed, "--out", s(&data)]));
    data
}

fn quick_pretrain(data: &Path, out: &Path) {
    ok(psgtool(&[
        "pretrain", "--data", s(data), "--out", s(out), "--steps", "4", "--batch-size", "4", "--checkpoint-every", "2", "--seed", "1",
    ]));
}

fn psgr_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "psgr")).collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "osa", "7");
    let b = tmp.path().join("again");
    ok(psgtool(&["gen-data", "--subjects", "5", "--epochs", "12", "--mode", "osa2", "--seed", "7", "--out", s(&b)]));
    let (fa, fb) = (psgr_files(&a), psgr_files(&b));
    assert_eq!(fa.len(), 5);
    assert!(a.join("manifest.json").exists() && a.join("config.toml").exists());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert!(!a.join(".psgtool.lock").exists());
}

#[test]
fn invalid_event_rate_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = psgtool(&["gen-data", "--event-rate", "1.5", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&psgtool(&["pretrain", "--steps", "many", "--out", "x"])), 2);
}

#[test]
fn missing_or_corrupt_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = psgtool(&["pretrain", "--data", s(&tmp.path().join("nowhere")), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let data = gen(tmp.path(), "osa", "2");
    let victim = &psgr_files(&data)[1];
    let mut bytes = fs::read(victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(victim, bytes).unwrap();
    let out = psgtool(&["pretrain", "--data", s(&data), "--out", s(&tmp.path().join("r2")), "--steps", "1"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn pretrain_reruns_reproduce_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "osa", "3");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    quick_pretrain(&data, &a);
    quick_pretrain(&data, &b);
    ok(psgtool(&["pretrain", "--config", s(&a.join("config.toml")), "--out", s(&c)]));
    let log = fs::read(a.join("steps.ndjson")).unwrap();
    assert_eq!(String::from_utf8_lossy(&log).lines().count(), 4);
    for other in [&b, &c] {
        assert_eq!(fs::read(other.join("steps.ndjson")).unwrap(), log);
        assert_eq!(fs::read(other.join("checkpoint.psgc")).unwrap(), fs::read(a.join("checkpoint.psgc")).unwrap());
    }
    let snapshot = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(snapshot.contains("max_steps = 4"));
}

#[test]
fn environment_sits_between_flags_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "osa", "4");
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[pretrain]\nmax_steps = 3\nbatch_size = 4\n").unwrap();
    let env_run = tmp.path().join("env");
    ok(psgtool_env(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&env_run)], &[("PSGTOOL_STEPS", "2")]));
    assert_eq!(fs::read_to_string(env_run.join("steps.ndjson")).unwrap().lines().count(), 2);
    let flag_run = tmp.path().join("flag");
    ok(psgtool_env(
        &["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&flag_run), "--steps", "1"],
        &[("PSGTOOL_STEPS", "2")],
    ));
    assert_eq!(fs::read_to_string(flag_run.join("steps.ndjson")).unwrap().lines().count(), 1);
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "osa", "5");
    let out = tmp.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".psgtool.lock"), "").unwrap();
    let res = psgtool(&["pretrain", "--data", s(&data), "--out", s(&out), "--steps", "1"]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("in use"));
}

#[test]
fn evaluate_reconstruct_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "staging", "6");
    let run = tmp.path().join("p");
    ok(psgtool(&["pretrain", "--data", s(&data), "--out", s(&run), "--steps", "0"]));

    let eval = tmp.path().join("eval");
    ok(psgtool(&["evaluate", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let mse = report["reconstruction"]["mean_mse"].as_f64().unwrap();
    let baseline = report["reconstruction"]["mean_baseline"].as_f64().unwrap();
    assert!((baseline - 1.0).abs() < 0.1, "baseline {baseline}");
    assert!(mse > 0.8 * baseline && mse < 1.5 * baseline, "untrained mse {mse}");
    assert!(report["classification"].is_null());

    let rec = tmp.path().join("rec");
    ok(psgtool(&["reconstruct", "--checkpoint", s(&run), "--data", s(&data), "--epoch-index", "5", "--out", s(&rec)]));
    let trace = fs::read_to_string(rec.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3000);
    let out_of_range = psgtool(&["reconstruct", "--checkpoint", s(&run), "--data", s(&data), "--epoch-index", "99", "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(code(&out_of_range), 2);

    let loss = tmp.path().join("loss");
    let quick = tmp.path().join("q");
    quick_pretrain(&data, &quick);
    ok(psgtool(&["export", "loss", "--run", s(&quick), "--out", s(&loss)]));
    let csv = fs::read_to_string(loss.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,l_cos,l_mse,l_recon,l_cl,total,lr,clipped"));

    let (f1, f2) = (tmp.path().join("f1"), tmp.path().join("f2"));
    ok(psgtool(&["export", "features", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&f1)]));
    ok(psgtool(&["export", "features", "--config", s(&f1.join("config.toml")), "--out", s(&f2)]));
    let features = fs::read(f1.join("features.csv")).unwrap();
    assert_eq!(features, fs::read(f2.join("features.csv")).unwrap());
    let text = String::from_utf8(features).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 12);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 64 + 1);

    let mismatch = psgtool(&["evaluate", "--checkpoint", s(&run), "--data", s(&data), "--center", "mean", "--out", s(&tmp.path().join("e2"))]);
    assert_eq!(code(&mismatch), 4);
}

#[test]
fn finetune_runs_subject_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "osa", "8");
    let run = tmp.path().join("p");
    quick_pretrain(&data, &run);
    let ft = tmp.path().join("ft");
    ok(psgtool(&[
        "finetune", "--task", "osa", "--pretrained", s(&run), "--data", s(&data), "--folds", "5", "--steps", "3",
        "--batch-size", "4", "--checkpoint-every", "3", "--freeze-encoder", "--out", s(&ft),
    ]));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("cv_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["folds"], 5);
    let pretrained = Checkpoint::load(run.join("checkpoint.psgc")).unwrap();
    for fold in 0..5 {
        let dir = ft.join(format!("fold-{fold}"));
        assert!(dir.join("report.json").exists());
        let tuned = Checkpoint::load(dir.join("checkpoint.psgc")).unwrap();
        assert_eq!(tuned.params.encoder, pretrained.params.encoder);
        assert!(tuned.params.head.is_some());
    }

    let eval = tmp.path().join("eval");
    ok(psgtool(&["evaluate", "--checkpoint", s(&ft.join("fold-0")), "--data", s(&data), "--out", s(&eval)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(report["classification"]["macro_f1"].is_number());

    let wrong = psgtool(&["finetune", "--task", "staging", "--pretrained", s(&run), "--data", s(&data), "--out", s(&tmp.path().join("w"))]);
    assert_eq!(code(&wrong), 4);
}

#[test]
fn gradcheck_passes() {
    let out = ok(psgtool(&["gradcheck"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all gradients within"));
}
