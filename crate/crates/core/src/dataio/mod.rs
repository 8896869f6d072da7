//! Recordings, their on-disk format, synthetic cohorts, splits, and imports.

mod format;
mod import;
mod split;
mod synth;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use format::{read_recording, recording_bytes, recording_from_bytes, write_recording, FORMAT_VERSION, MAGIC};
pub use import::{import_text_recording, read_label_csv, ImportSidecar};
pub use split::{class_weights, make_split, make_subject_folds, EpochRef, EpochSplit, SplitPlan, SplitUnit};
pub use synth::{
    default_channel_profiles, generate_cohort, generate_synthetic, generate_synthetic_with_truth, Burst, ChannelProfile,
    EpochTruth, SynthConfig,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{compute_norm_stats, normalize_matrix, CenterMode, NormStats, NORM_EPSILON};

/// Sleep stage categories, in category-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    R,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::R];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::R => "R",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpochLabel {
    pub stage: Option<Stage>,
    /// `Some(true)` marks an apnea event epoch.
    pub osa: Option<bool>,
}

impl EpochLabel {
    pub fn is_valid(&self) -> bool {
        self.stage.is_some() || self.osa.is_some()
    }
}

/// The labelling task a recording was annotated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Staging5,
    Osa2,
}

impl LabelMode {
    pub fn num_classes(self) -> usize {
        match self {
            LabelMode::Staging5 => 5,
            LabelMode::Osa2 => 2,
        }
    }

    /// Category index of `label` under this task.
    pub fn category(self, label: &EpochLabel) -> Option<usize> {
        match self {
            LabelMode::Staging5 => label.stage.map(Stage::index),
            LabelMode::Osa2 => label.osa.map(usize::from),
        }
    }
}

/// One subject-night: `(C, total_length)` samples and optional per-epoch labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub channel_names: Vec<String>,
    pub sampling_hz: usize,
    pub epoch_seconds: usize,
    pub samples: Array2<f32>,
    pub label_mode: Option<LabelMode>,
    pub labels: Option<Vec<EpochLabel>>,
}

impl Recording {
    /// Validates and trims any trailing partial epoch (and surplus labels).
    pub fn new(
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
        sampling_hz: usize,
        epoch_seconds: usize,
        samples: Array2<f32>,
        label_mode: Option<LabelMode>,
        labels: Option<Vec<EpochLabel>>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(Error::InvalidConfig("empty subject id".into()));
        }
        if channel_names.len() != samples.nrows() || channel_names.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                samples.nrows()
            )));
        }
        if sampling_hz == 0 || epoch_seconds == 0 {
            return Err(Error::InvalidConfig("sampling rate and epoch length must be positive".into()));
        }
        let epoch_len = sampling_hz * epoch_seconds;
        let n_epochs = samples.ncols() / epoch_len;
        let samples = if samples.ncols() % epoch_len == 0 {
            samples
        } else {
            samples.slice(s![.., ..n_epochs * epoch_len]).to_owned()
        };
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEpoch("non-finite sample".into()));
        }
        let labels = match labels {
            Some(mut l) => {
                if l.len() < n_epochs {
                    return Err(Error::LengthMismatch { left: l.len(), right: n_epochs });
                }
                l.truncate(n_epochs);
                if l.iter().any(|x| !x.is_valid()) {
                    return Err(Error::InvalidConfig("label with neither stage nor osa".into()));
                }
                Some(l)
            }
            None => None,
        };
        if label_mode.is_some() != labels.is_some() {
            return Err(Error::InvalidConfig("label mode and labels must be given together".into()));
        }
        Ok(Self { subject_id, channel_names, sampling_hz, epoch_seconds, samples, label_mode, labels })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn epoch_len(&self) -> usize {
        self.sampling_hz * self.epoch_seconds
    }

    pub fn n_epochs(&self) -> usize {
        self.samples.ncols() / self.epoch_len()
    }

    pub fn epoch(&self, i: usize) -> ArrayView2<'_, f32> {
        let l = self.epoch_len();
        self.samples.slice(s![.., i * l..(i + 1) * l])
    }

    pub fn norm_stats(&self, mode: CenterMode) -> Result<NormStats> {
        compute_norm_stats(self.samples.view(), mode)
    }
}

/// Normalized epochs drawn from one or more recordings.
#[derive(Debug, Clone)]
pub struct EpochDataset<F> {
    pub epochs: Vec<Array2<F>>,
    pub labels: Vec<Option<EpochLabel>>,
    pub refs: Vec<EpochRef>,
    pub subject_ids: Vec<String>,
    pub channel_names: Vec<String>,
    pub sampling_hz: usize,
    pub epoch_seconds: usize,
    pub center_mode: CenterMode,
}

impl<F: Scalar> EpochDataset<F> {
    /// Every epoch of `recordings`, each recording normalized with its own
    /// whole-night statistics.
    pub fn from_recordings(recordings: &[Recording], center_mode: CenterMode) -> Result<Self> {
        let all: Vec<EpochRef> = recordings
            .iter()
            .enumerate()
            .flat_map(|(r, rec)| (0..rec.n_epochs()).map(move |e| EpochRef { recording: r, epoch: e }))
            .collect();
        Self::select(recordings, &all, center_mode)
    }

    /// The epochs named by `refs`, in that order.
    pub fn select(recordings: &[Recording], refs: &[EpochRef], center_mode: CenterMode) -> Result<Self> {
        let first = recordings.first().ok_or(Error::TooFewEpochs { needed: 1, got: 0 })?;
        for rec in recordings {
            if rec.channels() != first.channels() || rec.epoch_len() != first.epoch_len() {
                return Err(Error::DimensionMismatch(format!(
                    "recording {} has shape ({}, {}) per epoch, expected ({}, {})",
                    rec.subject_id,
                    rec.channels(),
                    rec.epoch_len(),
                    first.channels(),
                    first.epoch_len()
                )));
            }
        }
        let stats = recordings.iter().map(|r| r.norm_stats(center_mode)).collect::<Result<Vec<_>>>()?;
        let mut epochs = Vec::with_capacity(refs.len());
        let mut labels = Vec::with_capacity(refs.len());
        for r in refs {
            let rec = recordings.get(r.recording).ok_or(Error::LengthMismatch { left: r.recording, right: recordings.len() })?;
            if r.epoch >= rec.n_epochs() {
                return Err(Error::LengthMismatch { left: r.epoch, right: rec.n_epochs() });
            }
            let cast = rec.epoch(r.epoch).mapv(|v| F::of(f64::from(v)));
            epochs.push(normalize_matrix(cast.view(), &stats[r.recording], NORM_EPSILON)?);
            labels.push(rec.labels.as_ref().map(|l| l[r.epoch]));
        }
        Ok(Self {
            epochs,
            labels,
            refs: refs.to_vec(),
            subject_ids: recordings.iter().map(|r| r.subject_id.clone()).collect(),
            channel_names: first.channel_names.clone(),
            sampling_hz: first.sampling_hz,
            epoch_seconds: first.epoch_seconds,
            center_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn epoch_len(&self) -> usize {
        self.sampling_hz * self.epoch_seconds
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, F>> {
        self.epochs.iter().map(|e| e.view()).collect()
    }

    /// Category indices for `mode`; errors if any epoch lacks that label.
    pub fn categories(&self, mode: LabelMode) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.as_ref()
                    .and_then(|l| mode.category(l))
                    .ok_or_else(|| Error::LabelModeMismatch(format!("epoch {i} has no {mode:?} label")))
            })
            .collect()
    }

    /// Subset by position in this dataset.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            epochs: positions.iter().map(|&i| self.epochs[i].clone()).collect(),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            refs: positions.iter().map(|&i| self.refs[i]).collect(),
            subject_ids: self.subject_ids.clone(),
            channel_names: self.channel_names.clone(),
            sampling_hz: self.sampling_hz,
            epoch_seconds: self.epoch_seconds,
            center_mode: self.center_mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(len: usize) -> Result<Recording> {
        Recording::new("s1", vec!["a".into(), "b".into()], 2, 2, Array2::zeros((2, len)), None, None)
    }

    #[test]
    fn trailing_partial_epoch_is_trimmed() {
        let r = rec(10).unwrap();
        assert_eq!(r.samples.ncols(), 8);
        assert_eq!(r.n_epochs(), 2);
    }

    #[test]
    fn rejects_bad_metadata() {
        assert!(Recording::new("", vec!["a".into()], 2, 2, Array2::zeros((1, 4)), None, None).is_err());
        assert!(Recording::new("s", vec!["a".into()], 2, 2, Array2::zeros((2, 4)), None, None).is_err());
        let bad_label = vec![EpochLabel::default()];
        assert!(Recording::new("s", vec!["a".into()], 2, 2, Array2::zeros((1, 4)), Some(LabelMode::Osa2), Some(bad_label)).is_err());
    }

    #[test]
    fn dataset_normalizes_per_recording() {
        let mut samples = Array2::zeros((2, 8));
        for t in 0..8 {
            samples[[0, t]] = 100.0 + t as f32;
            samples[[1, t]] = -3.0 * t as f32;
        }
        let r = Recording::new("s1", vec!["a".into(), "b".into()], 2, 2, samples, None, None).unwrap();
        let ds = EpochDataset::<f64>::from_recordings(&[r], CenterMode::Mean).unwrap();
        assert_eq!(ds.len(), 2);
        let all: Vec<f64> = ds.epochs.iter().flat_map(|e| e.row(0).to_vec()).collect();
        assert!(all.iter().sum::<f64>().abs() < 1e-9);
        let var = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stage_codes() {
        assert_eq!(Stage::parse("N3"), Some(Stage::N3));
        assert_eq!(Stage::from_index(4), Some(Stage::R));
        assert_eq!(LabelMode::Osa2.category(&EpochLabel { stage: None, osa: Some(true) }), Some(1));
    }
}
