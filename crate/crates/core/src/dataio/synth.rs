//! Synthetic multichannel recordings with known structure.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EpochLabel, LabelMode, Recording, Stage};
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, rng_for, Rng};

/// Oscillatory makeup of one synthetic channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
}

impl ChannelProfile {
    fn new(name: &str, frequencies: &[f64], amplitudes: &[f64], noise: f64) -> Self {
        Self { name: name.into(), frequencies: frequencies.to_vec(), amplitudes: amplitudes.to_vec(), noise }
    }
}

/// Two EEG-like, one EOG-like, one broadband EMG-like and one slow
/// airflow-like channel; extra channels reuse these with shifted frequencies.
pub fn default_channel_profiles(channel_count: usize) -> Vec<ChannelProfile> {
    let base = [
        ChannelProfile::new("EEG C4-A1", &[2.0, 6.0, 10.0, 13.0], &[1.0, 0.6, 0.8, 0.3], 0.05),
        ChannelProfile::new("EEG C3-A2", &[2.5, 5.0, 9.0, 14.0], &[1.0, 0.7, 0.7, 0.3], 0.05),
        ChannelProfile::new("EOG", &[0.5, 1.0, 3.0], &[1.0, 0.5, 0.3], 0.05),
        ChannelProfile::new("EMG chin", &[18.0, 23.0, 29.0, 37.0], &[0.5, 0.5, 0.5, 0.5], 0.08),
        ChannelProfile::new("Airflow", &[0.25, 0.4], &[1.0, 0.3], 0.03),
    ];
    (0..channel_count)
        .map(|i| {
            let mut p = base[i % base.len()].clone();
            let round = i / base.len();
            if round > 0 {
                p.name = format!("{} #{}", p.name, round + 1);
                for f in &mut p.frequencies {
                    *f *= 1.0 + 0.07 * round as f64;
                }
            }
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subject_id: String,
    pub channel_count: usize,
    pub epoch_count: usize,
    pub sampling_hz: usize,
    pub epoch_seconds: usize,
    /// Probability that an epoch carries a cross-channel burst.
    pub event_rate: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
    /// `None` uses [`default_channel_profiles`].
    pub channels: Option<Vec<ChannelProfile>>,
    pub burst_amplitude: f64,
    /// Clamped to the epoch length.
    pub burst_seconds: f64,
    pub burst_frequency: f64,
    /// Log-normal spread of per-subject component gains.
    pub subject_variability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_id: "SYN".into(),
            channel_count: 5,
            epoch_count: 200,
            sampling_hz: 100,
            epoch_seconds: 30,
            event_rate: 0.2,
            seed: 0,
            label_mode: LabelMode::Osa2,
            channels: None,
            burst_amplitude: 3.0,
            burst_seconds: 8.0,
            burst_frequency: 1.0,
            subject_variability: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn profiles(&self) -> Vec<ChannelProfile> {
        self.channels.clone().unwrap_or_else(|| default_channel_profiles(self.channel_count))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.event_rate) {
            return bad(format!("event_rate {} outside [0, 1]", self.event_rate));
        }
        if self.channel_count == 0 || self.epoch_count == 0 || self.sampling_hz == 0 || self.epoch_seconds == 0 {
            return bad("channel_count, epoch_count, sampling_hz and epoch_seconds must be positive".into());
        }
        if self.subject_id.is_empty() {
            return bad("empty subject id".into());
        }
        if self.event_rate > 0.0 && self.channel_count < 3 {
            return bad(format!("bursts span at least 3 channels, only {} configured", self.channel_count));
        }
        let nyquist = self.sampling_hz as f64 / 2.0;
        let profiles = self.profiles();
        if profiles.len() != self.channel_count {
            return bad(format!("{} channel profiles for {} channels", profiles.len(), self.channel_count));
        }
        for p in &profiles {
            if p.frequencies.len() != p.amplitudes.len() || p.frequencies.is_empty() {
                return bad(format!("channel {}: frequency and amplitude lists differ", p.name));
            }
            if let Some(f) = p.frequencies.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
                return bad(format!("channel {}: {f} Hz is not below the {nyquist} Hz Nyquist limit", p.name));
            }
            if p.noise < 0.0 || p.amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return bad(format!("channel {}: negative amplitude or noise", p.name));
            }
        }
        if self.event_rate > 0.0 {
            if !(self.burst_frequency > 0.0 && self.burst_frequency < nyquist) {
                return bad(format!("burst frequency {} Hz is not below Nyquist", self.burst_frequency));
            }
            if !(self.burst_seconds > 0.0) {
                return bad("burst_seconds must be positive".into());
            }
        }
        if !(self.subject_variability >= 0.0 && self.burst_amplitude.is_finite()) {
            return bad("subject_variability must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Burst {
    pub start: usize,
    pub len: usize,
    pub channels: Vec<usize>,
}

/// What the generator actually put into one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochTruth {
    pub class: Option<usize>,
    pub burst: Option<Burst>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Recording> {
    generate_synthetic_with_truth(cfg).map(|(r, _)| r)
}

/// `subjects` recordings with ids `<subject_id>-000`, `-001`, ... and
/// seeds derived from `cfg.seed`.
pub fn generate_cohort(cfg: &SynthConfig, subjects: usize) -> Result<Vec<Recording>> {
    (0..subjects)
        .map(|i| {
            let sub = SynthConfig {
                subject_id: format!("{}-{i:03}", cfg.subject_id),
                seed: derive_indexed(cfg.seed, "subject", i as u64),
                ..cfg.clone()
            };
            generate_synthetic(&sub)
        })
        .collect()
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-class emphasis of component `j` of channel `c`.
fn class_gain(class: usize, c: usize, j: usize, components: usize) -> f64 {
    let emphasized = if j == (class + c) % components { 3.0 } else { 0.6 };
    emphasized * (1.0 + 0.25 * ((class + 2 * c) % 3) as f64)
}

const STAGE_PERSISTENCE: f64 = 0.7;

pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(Recording, Vec<EpochTruth>)> {
    cfg.validate()?;
    let profiles = cfg.profiles();
    let c_count = cfg.channel_count;
    let fs = cfg.sampling_hz as f64;
    let epoch_len = cfg.sampling_hz * cfg.epoch_seconds;

    let mut subject_rng = rng_for(cfg.seed, "synth-subject");
    let component_gain: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| p.amplitudes.iter().map(|_| (cfg.subject_variability * normal(&mut subject_rng)).exp()).collect())
        .collect();
    let channel_gain: Vec<f64> = (0..c_count).map(|_| (0.5 * normal(&mut subject_rng)).exp()).collect();
    let channel_offset: Vec<f64> = (0..c_count).map(|_| normal(&mut subject_rng)).collect();

    let mut rng = rng_for(cfg.seed, "synth-epochs");
    let mut samples = Array2::<f32>::zeros((c_count, cfg.epoch_count * epoch_len));
    let mut labels = Vec::with_capacity(cfg.epoch_count);
    let mut truth = Vec::with_capacity(cfg.epoch_count);
    let mut class = rng.gen_range(0..Stage::ALL.len());
    let mut buf = vec![0.0f64; epoch_len];

    for e in 0..cfg.epoch_count {
        let staging = cfg.label_mode == LabelMode::Staging5;
        if staging && e > 0 && !rng.gen_bool(STAGE_PERSISTENCE) {
            class = rng.gen_range(0..Stage::ALL.len());
        }
        let burst = if cfg.event_rate > 0.0 && rng.gen_bool(cfg.event_rate) {
            let len = ((cfg.burst_seconds * fs).round() as usize).clamp(1, epoch_len);
            let start = rng.gen_range(0..=epoch_len - len);
            let k = rng.gen_range(3..=c_count);
            let mut channels = sample(&mut rng, c_count, k).into_vec();
            channels.sort_unstable();
            Some(Burst { start, len, channels })
        } else {
            None
        };
        let burst_phase = rng.gen_range(0.0..2.0 * PI);

        for (c, p) in profiles.iter().enumerate() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let components = p.frequencies.len();
            for (j, (&f, &a)) in p.frequencies.iter().zip(&p.amplitudes).enumerate() {
                let mut amp = a * component_gain[c][j] * rng.gen_range(0.7..1.3);
                if staging {
                    amp *= class_gain(class, c, j, components);
                }
                let phase = rng.gen_range(0.0..2.0 * PI);
                let w = 2.0 * PI * f / fs;
                for (t, v) in buf.iter_mut().enumerate() {
                    *v += amp * (w * t as f64 + phase).sin();
                }
            }
            for v in buf.iter_mut() {
                *v += p.noise * normal(&mut rng);
            }
            if let Some(b) = burst.as_ref().filter(|b| b.channels.contains(&c)) {
                let gain = cfg.burst_amplitude * rng.gen_range(0.8..1.2);
                let w = 2.0 * PI * cfg.burst_frequency / fs;
                for i in 0..b.len {
                    let envelope = (PI * (i as f64 + 0.5) / b.len as f64).sin().powi(2);
                    buf[b.start + i] += gain * envelope * (w * i as f64 + burst_phase).sin();
                }
            }
            let mut row = samples.row_mut(c);
            let base = e * epoch_len;
            for (t, v) in buf.iter().enumerate() {
                row[base + t] = (channel_gain[c] * v + channel_offset[c]) as f32;
            }
        }

        labels.push(EpochLabel {
            stage: if staging { Stage::from_index(class) } else { None },
            osa: Some(burst.is_some()),
        });
        truth.push(EpochTruth { class: staging.then_some(class), burst });
    }

    let rec = Recording::new(
        cfg.subject_id.clone(),
        profiles.iter().map(|p| p.name.clone()).collect(),
        cfg.sampling_hz,
        cfg.epoch_seconds,
        samples,
        Some(cfg.label_mode),
        Some(labels),
    )?;
    Ok((rec, truth))
}
