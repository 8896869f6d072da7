//! Pre-trains on a synthetic cohort and reports held-out reconstruction error.
//!
//! `cargo run --release --example pretrain_synthetic -- [steps] [subjects] [seed] [no-iccl] [out.psgc]`

use psg_core::dataio::{generate_cohort, make_split, EpochDataset, SplitUnit, SynthConfig};
use psg_core::evaluation::{reconstruction_mse_report, ReconEvalOptions};
use psg_core::model::ModelConfig;
use psg_core::signal::CenterMode;
use psg_core::training::{pretrain, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, subjects, seed) = (arg(0, 2000) as usize, arg(1, 20) as usize, arg(2, 1));
    let iccl = !args.iter().any(|a| a == "no-iccl");

    let recordings = generate_cohort(&SynthConfig { seed: 7, ..SynthConfig::default() }, subjects)?;
    let split = make_split(&recordings, (0.8, 0.1, 0.1), seed, SplitUnit::Epoch)?;
    let load = |refs| EpochDataset::<f32>::select(&recordings, refs, CenterMode::Median);
    let (train, val, test) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);

    let cfg = TrainConfig { max_steps: steps, seed, iccl_enabled: iccl, early_stop_patience: None, ..TrainConfig::default() };
    let (ck, log) = pretrain(&train, &val, &ModelConfig::default(), &cfg)?;
    for e in &log.evaluations {
        println!("step {:5} objective {:.4} l_cl {:.4} mse {:?}", e.step, e.objective, e.l_cl, e.per_channel_mse);
    }
    let report = reconstruction_mse_report(&ck, &test, &ReconEvalOptions::default())?;
    println!("held-out mse {:?} mean {:.4}", report.mse, report.mean_mse);
    println!("baseline    {:?} mean {:.4}", report.baseline, report.mean_baseline);
    println!("best step {:?}, {:.1}s", log.best_step, log.wall_clock_seconds);
    if let Some(path) = args.iter().find(|a| a.ends_with(".psgc")) {
        ck.save(path)?;
    }
    Ok(())
}
