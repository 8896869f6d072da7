//! Fine-tunes a pre-trained encoder on synthetic staging and OSA labels,
//! holding out one subject fold.
//!
//! `cargo run --release --example finetune_synthetic -- <checkpoint> [steps] [subjects] [freeze]`

use psg_core::checkpoint::Checkpoint;
use psg_core::dataio::{generate_cohort, make_subject_folds, EpochDataset, LabelMode, SynthConfig};
use psg_core::evaluation::{confusion, metrics};
use psg_core::signal::CenterMode;
use psg_core::training::{finetune, predict, HeadSettings, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pretrained = Checkpoint::load(args.first().ok_or("checkpoint path required")?)?;
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, subjects) = (arg(1, 600), arg(2, 10));
    let freeze_encoder = args.iter().any(|a| a == "freeze");

    for task in [LabelMode::Staging5, LabelMode::Osa2] {
        let synth = SynthConfig { seed: 21, label_mode: task, ..SynthConfig::default() };
        let recordings = generate_cohort(&synth, subjects)?;
        let plan = make_subject_folds(&recordings, 5, 0)?;
        let split = plan.fold_split(&recordings, 0)?;
        let load = |refs| EpochDataset::<f32>::select(&recordings, refs, CenterMode::Median);
        let (train, val, test) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);
        let cfg = TrainConfig { max_steps: steps, checkpoint_every: 50, freeze_encoder, ..TrainConfig::default() };
        let out = finetune(&train, &val, &pretrained, task, &HeadSettings::default(), &cfg)?;
        for e in &out.log.evaluations {
            println!("{task:?} step {:4} acc {:.4} mf1 {:.4}", e.step, e.accuracy, e.macro_f1);
        }
        let probs = predict(&out.checkpoint.params_as::<f32>(), &test.views(), 32)?;
        let pred = psg_core::evaluation::argmax_rows(probs.view());
        let report = metrics(&confusion(&test.categories(task)?, &pred, task.num_classes())?)?;
        println!("{task:?} test acc {:.4} mf1 {:.4} ({:.1}s)", report.accuracy, report.macro_f1, out.log.wall_clock_seconds);
    }
    Ok(())
}
