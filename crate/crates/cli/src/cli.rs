//! Flags. Every flag can also be set through a `PSGTOOL_*` variable; both
//! override the config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use psg_core::dataio::LabelMode;
use psg_core::losses::ReconTarget;
use psg_core::optim::OptimizerKind;
use psg_core::signal::CenterMode;

use crate::config::ToolConfig;

#[derive(Debug, Parser)]
#[command(name = "psgtool", version, about = "Masked-channel pre-training and evaluation for multichannel sleep recordings")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "PSGTOOL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream of the run.
    #[arg(long, global = true, env = "PSGTOOL_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort as .psgr recordings plus a manifest.
    GenData(GenDataArgs),
    /// Pre-train encoder and decoder on complementary-mask reconstruction.
    Pretrain(PretrainArgs),
    /// Fine-tune a classification head with subject-wise cross-validation.
    Finetune(FinetuneArgs),
    /// Reconstruction error (and classification metrics for fine-tuned checkpoints).
    Evaluate(EvaluateArgs),
    /// Original and reconstructed signal of one epoch as CSV.
    Reconstruct(ReconstructArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// CSV exports for external plotting.
    #[command(subcommand)]
    Export(ExportCommand),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Reconstruct(_) => "reconstruct",
            Command::Gradcheck(_) => "gradcheck",
            Command::Export(ExportCommand::Loss(_)) => "export loss",
            Command::Export(ExportCommand::Features(_)) => "export features",
        }
    }
}

fn parse_task(s: &str) -> Result<LabelMode, String> {
    match s {
        "staging" | "staging5" => Ok(LabelMode::Staging5),
        "osa" | "osa2" => Ok(LabelMode::Osa2),
        _ => Err(format!("unknown task `{s}` (staging, osa)")),
    }
}

fn parse_center(s: &str) -> Result<CenterMode, String> {
    match s {
        "median" => Ok(CenterMode::Median),
        "mean" => Ok(CenterMode::Mean),
        _ => Err(format!("unknown centering `{s}` (median, mean)")),
    }
}

fn parse_target(s: &str) -> Result<ReconTarget, String> {
    match s {
        "visible" => Ok(ReconTarget::Visible),
        "hidden" => Ok(ReconTarget::Hidden),
        "all" => Ok(ReconTarget::All),
        _ => Err(format!("unknown reconstruction target `{s}` (visible, hidden, all)")),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" | "adaptive-moment" => Ok(OptimizerKind::AdaptiveMoment),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer `{s}` (adam, sgd)")),
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PSGTOOL_SUBJECTS")]
    pub subjects: Option<usize>,
    /// Epochs per recording.
    #[arg(long, env = "PSGTOOL_EPOCHS")]
    pub epochs: Option<usize>,
    /// Label task: staging or osa.
    #[arg(long, env = "PSGTOOL_MODE", value_parser = parse_task)]
    pub mode: Option<LabelMode>,
    #[arg(long, env = "PSGTOOL_EVENT_RATE")]
    pub event_rate: Option<f64>,
    #[arg(long, env = "PSGTOOL_CHANNELS")]
    pub channels: Option<usize>,
    #[arg(long, env = "PSGTOOL_SAMPLING_HZ")]
    pub sampling_hz: Option<usize>,
    #[arg(long, env = "PSGTOOL_EPOCH_SECONDS")]
    pub epoch_seconds: Option<usize>,
}

impl GenDataArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set(&mut cfg.generate.subjects, self.subjects);
        set(&mut cfg.synth.epoch_count, self.epochs);
        set(&mut cfg.synth.label_mode, self.mode);
        set(&mut cfg.synth.event_rate, self.event_rate);
        set(&mut cfg.synth.channel_count, self.channels);
        set(&mut cfg.synth.sampling_hz, self.sampling_hz);
        set(&mut cfg.synth.epoch_seconds, self.epoch_seconds);
    }
}

/// Optimizer and loop flags shared by pre-training and fine-tuning.
#[derive(Debug, Args)]
pub struct LoopArgs {
    #[arg(long, env = "PSGTOOL_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "PSGTOOL_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "PSGTOOL_LR")]
    pub lr: Option<f64>,
    /// adam or sgd.
    #[arg(long, env = "PSGTOOL_OPTIMIZER", value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Steps between validation evaluations.
    #[arg(long, env = "PSGTOOL_CHECKPOINT_EVERY")]
    pub checkpoint_every: Option<usize>,
    /// Evaluations without improvement before stopping; 0 disables.
    #[arg(long, env = "PSGTOOL_PATIENCE")]
    pub patience: Option<usize>,
}

impl LoopArgs {
    fn apply(&self, train: &mut psg_core::training::TrainConfig) {
        set(&mut train.max_steps, self.steps);
        set(&mut train.batch_size, self.batch_size);
        set(&mut train.optimizer.learning_rate, self.lr);
        set(&mut train.optimizer.kind, self.optimizer);
        set(&mut train.checkpoint_every, self.checkpoint_every);
        if let Some(p) = self.patience {
            train.early_stop_patience = (p > 0).then_some(p);
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory of .psgr recordings.
    #[arg(long, env = "PSGTOOL_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PSGTOOL_N_PATCH")]
    pub n_patch: Option<usize>,
    /// Contrastive margin.
    #[arg(long, env = "PSGTOOL_ALPHA")]
    pub alpha: Option<f64>,
    /// Drop the contrastive term from the objective.
    #[arg(long, env = "PSGTOOL_NO_ICCL")]
    pub no_iccl: bool,
    #[arg(long, env = "PSGTOOL_RECON_TARGET", value_parser = parse_target)]
    pub recon_target: Option<ReconTarget>,
    #[arg(long, env = "PSGTOOL_CENTER", value_parser = parse_center)]
    pub center: Option<CenterMode>,
    #[command(flatten)]
    pub train: LoopArgs,
}

impl PretrainArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set_path(&mut cfg.data.dir, &self.data);
        set(&mut cfg.data.center_mode, self.center);
        set(&mut cfg.model.n_patch, self.n_patch);
        set(&mut cfg.pretrain.iccl.margin_alpha, self.alpha);
        set(&mut cfg.pretrain.recon_target, self.recon_target);
        if self.no_iccl {
            cfg.pretrain.iccl_enabled = false;
        }
        self.train.apply(&mut cfg.pretrain);
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// staging or osa.
    #[arg(long, env = "PSGTOOL_TASK", value_parser = parse_task)]
    pub task: Option<LabelMode>,
    /// Pre-training checkpoint, or the run directory holding it.
    #[arg(long, env = "PSGTOOL_PRETRAINED")]
    pub pretrained: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PSGTOOL_FOLDS")]
    pub folds: Option<usize>,
    /// Train the head only.
    #[arg(long, env = "PSGTOOL_FREEZE_ENCODER")]
    pub freeze_encoder: bool,
    #[arg(long, env = "PSGTOOL_CENTER", value_parser = parse_center)]
    pub center: Option<CenterMode>,
    #[command(flatten)]
    pub train: LoopArgs,
}

impl FinetuneArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set_path(&mut cfg.data.dir, &self.data);
        set_path(&mut cfg.checkpoint, &self.pretrained);
        set(&mut cfg.data.center_mode, self.center);
        if self.task.is_some() {
            cfg.finetune.task = self.task;
        }
        set(&mut cfg.finetune.folds, self.folds);
        if self.freeze_encoder {
            cfg.finetune.train.freeze_encoder = true;
        }
        self.train.apply(&mut cfg.finetune.train);
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, env = "PSGTOOL_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PSGTOOL_MASK_SEED")]
    pub mask_seed: Option<u64>,
    #[arg(long, env = "PSGTOOL_CENTER", value_parser = parse_center)]
    pub center: Option<CenterMode>,
}

impl EvaluateArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set_path(&mut cfg.checkpoint, &self.checkpoint);
        set_path(&mut cfg.data.dir, &self.data);
        set(&mut cfg.data.center_mode, self.center);
        set(&mut cfg.evaluate.mask_seed, self.mask_seed);
    }
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, env = "PSGTOOL_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
    /// Recording position in the sorted data directory.
    #[arg(long, env = "PSGTOOL_RECORDING")]
    pub recording: Option<usize>,
    #[arg(long, env = "PSGTOOL_EPOCH_INDEX")]
    pub epoch_index: Option<usize>,
    #[arg(long, env = "PSGTOOL_MASK_SEED")]
    pub mask_seed: Option<u64>,
    #[arg(long, env = "PSGTOOL_CENTER", value_parser = parse_center)]
    pub center: Option<CenterMode>,
}

impl ReconstructArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set_path(&mut cfg.checkpoint, &self.checkpoint);
        set_path(&mut cfg.data.dir, &self.data);
        set(&mut cfg.data.center_mode, self.center);
        set(&mut cfg.reconstruct.recording, self.recording);
        set(&mut cfg.reconstruct.epoch_index, self.epoch_index);
        set(&mut cfg.reconstruct.mask_seed, self.mask_seed);
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also write the full report and a config snapshot here.
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    /// Per-step losses of a run as CSV.
    Loss(ExportLossArgs),
    /// Token-averaged encoder features per epoch, with labels.
    Features(ExportFeaturesArgs),
}

#[derive(Debug, Args)]
pub struct ExportLossArgs {
    /// Run directory containing steps.ndjson.
    #[arg(long, env = "PSGTOOL_RUN")]
    pub run: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
}

impl ExportLossArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set_path(&mut cfg.export.run, &self.run);
    }
}

#[derive(Debug, Args)]
pub struct ExportFeaturesArgs {
    #[arg(long, env = "PSGTOOL_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "PSGTOOL_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PSGTOOL_CENTER", value_parser = parse_center)]
    pub center: Option<CenterMode>,
}

impl ExportFeaturesArgs {
    pub fn apply(&self, cfg: &mut ToolConfig) {
        set_path(&mut cfg.checkpoint, &self.checkpoint);
        set_path(&mut cfg.data.dir, &self.data);
        set(&mut cfg.data.center_mode, self.center);
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let cli = Cli::try_parse_from(["psgtool", "pretrain", "--out", "r", "--steps", "7", "--no-iccl", "--alpha", "0.5"]).unwrap();
        let mut cfg: ToolConfig = toml::from_str("[pretrain]\nmax_steps = 100\nbatch_size = 4\n").unwrap();
        let Command::Pretrain(args) = &cli.command else { panic!() };
        args.apply(&mut cfg);
        assert_eq!(cfg.pretrain.max_steps, 7);
        assert_eq!(cfg.pretrain.batch_size, 4);
        assert!(!cfg.pretrain.iccl_enabled);
        assert_eq!(cfg.pretrain.iccl.margin_alpha, 0.5);
    }

    #[test]
    fn task_names() {
        assert_eq!(parse_task("staging"), Ok(LabelMode::Staging5));
        assert_eq!(parse_task("osa2"), Ok(LabelMode::Osa2));
        assert!(parse_task("apnea").is_err());
    }

    #[test]
    fn zero_patience_disables_early_stopping() {
        let cli = Cli::try_parse_from(["psgtool", "finetune", "--out", "r", "--patience", "0"]).unwrap();
        let mut cfg = ToolConfig::default();
        let Command::Finetune(args) = &cli.command else { panic!() };
        args.apply(&mut cfg);
        assert_eq!(cfg.finetune.train.early_stop_patience, None);
    }
}
