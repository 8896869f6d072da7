//! Layered run configuration: built-in defaults, then a TOML file, then
//! environment variables and flags (clap resolves those two).

use std::path::{Path, PathBuf};

use psg_core::dataio::{LabelMode, SplitUnit, SynthConfig};
use psg_core::model::ModelConfig;
use psg_core::signal::CenterMode;
use psg_core::training::{HeadSettings, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    /// Input checkpoint for finetune, evaluate, reconstruct and export.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataSection,
    pub generate: GenerateSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneSection,
    pub evaluate: EvaluateSection,
    pub reconstruct: ReconstructSection,
    pub export: ExportSection,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: None,
            data: DataSection::default(),
            generate: GenerateSection::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: FinetuneSection::default(),
            evaluate: EvaluateSection::default(),
            reconstruct: ReconstructSection::default(),
            export: ExportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub center_mode: CenterMode,
    /// train / validation / test shares for pre-training.
    pub fractions: [f64; 3],
    pub split_unit: SplitUnit,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: None, center_mode: CenterMode::Median, fractions: [0.8, 0.1, 0.1], split_unit: SplitUnit::Epoch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub subjects: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { subjects: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<LabelMode>,
    pub folds: usize,
    pub head: HeadSettings,
    pub train: TrainConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            task: None,
            folds: 5,
            head: HeadSettings::default(),
            train: TrainConfig { max_steps: 600, checkpoint_every: 50, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub mask_seed: u64,
    pub batch_size: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { mask_seed: 0, batch_size: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    /// Position of the recording in the data directory's sorted file list.
    pub recording: usize,
    pub epoch_index: usize,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Run directory whose `steps.ndjson` becomes the loss CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<PathBuf>,
}

impl ToolConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self, command: &str) -> Result<String, Failure> {
        let body = toml::to_string(self).map_err(|e| Failure::usage(format!("cannot snapshot config: {e}")))?;
        Ok(format!("# effective configuration of `psgtool {command}`\n{body}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = ToolConfig { seed: 17, checkpoint: Some("runs/p1".into()), ..ToolConfig::default() };
        cfg.finetune.task = Some(LabelMode::Osa2);
        cfg.pretrain.iccl.margin_alpha = 0.3;
        let text = cfg.to_toml("pretrain").unwrap();
        assert_eq!(toml::from_str::<ToolConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: ToolConfig = toml::from_str("seed = 3\n[pretrain]\nmax_steps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pretrain.max_steps, 10);
        assert_eq!(cfg.pretrain.batch_size, 32);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ToolConfig>("[pretrain]\nmax_step = 10\n").is_err());
    }
}
