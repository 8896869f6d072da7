use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One optimizer step of pre-training, losses measured on that step's batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStep {
    pub step: usize,
    pub l_cos: f64,
    pub l_mse: f64,
    pub l_recon: f64,
    pub l_cl: f64,
    pub total: f64,
    pub lr: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEval {
    /// Number of updates applied before this evaluation.
    pub step: usize,
    /// The quantity being minimized, used for checkpoint selection.
    pub objective: f64,
    pub total: f64,
    pub l_recon: f64,
    pub l_cl: f64,
    pub per_channel_mse: Vec<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEval {
    pub step: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog<S, E> {
    pub config: serde_json::Value,
    pub steps: Vec<S>,
    pub evaluations: Vec<E>,
    pub best_step: Option<usize>,
    pub stopped_early: bool,
    /// Not part of any determinism guarantee.
    pub wall_clock_seconds: f64,
}

impl<S: Serialize, E: Serialize> RunLog<S, E> {
    pub(crate) fn new(config: serde_json::Value) -> Self {
        Self { config, steps: Vec::new(), evaluations: Vec::new(), best_step: None, stopped_early: false, wall_clock_seconds: 0.0 }
    }

    fn ndjson<T: Serialize>(items: &[T]) -> String {
        let mut out = String::new();
        for item in items {
            let _ = writeln!(out, "{}", serde_json::to_string(item).expect("record serializes"));
        }
        out
    }

    /// Step records, one JSON object per line.
    pub fn steps_ndjson(&self) -> String {
        Self::ndjson(&self.steps)
    }

    pub fn evaluations_ndjson(&self) -> String {
        Self::ndjson(&self.evaluations)
    }

    pub fn write_steps(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.steps_ndjson())?;
        Ok(())
    }

    pub fn write_evaluations(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.evaluations_ndjson())?;
        Ok(())
    }
}
