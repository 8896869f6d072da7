//! Contrastive-term ablation on a synthetic cohort.
//!
//! `cargo run --release --example ablation_synthetic -- [steps] [subjects] [seeds]`

use psg_core::dataio::{generate_cohort, make_split, EpochDataset, SplitUnit, SynthConfig};
use psg_core::model::ModelConfig;
use psg_core::signal::CenterMode;
use psg_core::training::{run_ablation, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, subjects, n_seeds) = (arg(0, 500) as usize, arg(1, 20) as usize, arg(2, 5));

    let recordings = generate_cohort(&SynthConfig { seed: 7, ..SynthConfig::default() }, subjects)?;
    let split = make_split(&recordings, (0.8, 0.1, 0.1), 0, SplitUnit::Epoch)?;
    let load = |refs| EpochDataset::<f32>::select(&recordings, refs, CenterMode::Median);
    let (train, val, test) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);

    let cfg = TrainConfig { max_steps: steps, early_stop_patience: None, ..TrainConfig::default() };
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    let report = run_ablation(&train, &val, &test, &ModelConfig::default(), &cfg, &seeds)?;
    for s in &report.seeds {
        println!(
            "seed {} eeg mse with {:.5} without {:.5} lower {}",
            s.seed, s.with_iccl.eeg_mean_mse, s.without_iccl.eeg_mean_mse, s.iccl_lower_eeg
        );
    }
    println!("iccl wins {}/{}", report.iccl_wins, report.seeds.len());
    Ok(())
}
