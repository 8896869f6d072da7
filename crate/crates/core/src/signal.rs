//! Epoch containers, subsegmentation, and per-channel robust Z-scoring.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EPOCH_SECONDS: usize = 30;
pub const DEFAULT_N_PATCH: usize = 10;
pub const NORM_EPSILON: f64 = 1e-8;

/// One epoch of a multichannel recording, rows are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMatrix<F> {
    data: Array2<F>,
    sampling_hz: usize,
    epoch_seconds: usize,
}

impl<F: Scalar> EpochMatrix<F> {
    pub fn new(data: Array2<F>, sampling_hz: usize, epoch_seconds: usize) -> Result<Self> {
        let (c, l) = data.dim();
        if c == 0 || l == 0 {
            return Err(Error::InvalidEpoch(format!("empty epoch of shape ({c}, {l})")));
        }
        if sampling_hz == 0 || epoch_seconds == 0 || l != sampling_hz * epoch_seconds {
            return Err(Error::InvalidEpoch(format!(
                "length {l} != {epoch_seconds} s x {sampling_hz} Hz"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEpoch(format!(
                "non-finite sample at channel {}, step {}",
                pos / l,
                pos % l
            )));
        }
        Ok(Self { data, sampling_hz, epoch_seconds })
    }

    /// Epoch whose length is taken as one second at `L` Hz.
    pub fn from_raw(data: Array2<F>) -> Result<Self> {
        let l = data.ncols();
        Self::new(data, l, 1)
    }

    pub fn data(&self) -> &Array2<F> {
        &self.data
    }

    pub fn into_data(self) -> Array2<F> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sampling_hz(&self) -> usize {
        self.sampling_hz
    }

    pub fn epoch_seconds(&self) -> usize {
        self.epoch_seconds
    }

    pub fn cast<G: Scalar>(&self) -> EpochMatrix<G> {
        EpochMatrix {
            data: self.data.mapv(|v| G::of(v.to_f64_lossy())),
            sampling_hz: self.sampling_hz,
            epoch_seconds: self.epoch_seconds,
        }
    }
}

/// Contiguous time slices `x_1 .. x_N` of an epoch, each `(C, L')`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedEpoch<F> {
    segments: Vec<Array2<F>>,
    l_prime: usize,
}

impl<F: Scalar> SegmentedEpoch<F> {
    pub fn from_segments(segments: Vec<Array2<F>>) -> Result<Self> {
        let first = segments.first().ok_or(Error::TooFewPatches(0))?;
        let shape = first.dim();
        if let Some(bad) = segments.iter().find(|s| s.dim() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "segment shape {:?} differs from {:?}",
                bad.dim(),
                shape
            )));
        }
        Ok(Self { l_prime: shape.1, segments })
    }

    /// Rebuild from token rows laid out channel-major (`c * L' + t`).
    pub fn from_token_rows(rows: ArrayView2<F>, channels: usize) -> Result<Self> {
        let width = rows.ncols();
        if channels == 0 || width % channels != 0 {
            return Err(Error::ShapeMismatch(format!(
                "token width {width} not divisible by {channels} channels"
            )));
        }
        let l_prime = width / channels;
        let segments = rows
            .outer_iter()
            .map(|row| {
                row.to_owned()
                    .into_shape_with_order((channels, l_prime))
                    .expect("width checked above")
            })
            .collect();
        Self::from_segments(segments)
    }

    pub fn segments(&self) -> &[Array2<F>] {
        &self.segments
    }

    pub fn n_patch(&self) -> usize {
        self.segments.len()
    }

    pub fn l_prime(&self) -> usize {
        self.l_prime
    }

    pub fn channels(&self) -> usize {
        self.segments[0].nrows()
    }

    /// Rejoin along time; exact inverse of [`segment_epoch`].
    pub fn concat(&self) -> Array2<F> {
        let views: Vec<_> = self.segments.iter().map(|s| s.view()).collect();
        concatenate(Axis(1), &views).expect("segments share a channel count")
    }

    /// One row per subsegment, flattened channel-major.
    pub fn to_token_rows(&self) -> Array2<F> {
        let width = self.channels() * self.l_prime;
        let mut out = Array2::zeros((self.n_patch(), width));
        for (mut row, seg) in out.outer_iter_mut().zip(&self.segments) {
            row.iter_mut().zip(seg.iter()).for_each(|(o, v)| *o = *v);
        }
        out
    }
}

pub fn segment_epoch<F: Scalar>(epoch: &EpochMatrix<F>, n_patch: usize) -> Result<SegmentedEpoch<F>> {
    segment_matrix(epoch.data().view(), n_patch)
}

pub(crate) fn segment_matrix<F: Scalar>(data: ArrayView2<F>, n_patch: usize) -> Result<SegmentedEpoch<F>> {
    if n_patch < 2 {
        return Err(Error::TooFewPatches(n_patch));
    }
    let length = data.ncols();
    if length % n_patch != 0 {
        return Err(Error::NonDivisibleLength { length, n_patch });
    }
    let l_prime = length / n_patch;
    let segments = (0..n_patch)
        .map(|i| data.slice(s![.., i * l_prime..(i + 1) * l_prime]).to_owned())
        .collect();
    Ok(SegmentedEpoch { segments, l_prime })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterMode {
    #[default]
    Median,
    Mean,
}

/// Per-channel location and spread of a whole recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub mode: CenterMode,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.center.len()
    }
}

/// Rows of `channels` are the complete sample streams of each channel.
/// The spread is the population standard deviation around the mean,
/// whichever center is chosen.
pub fn compute_norm_stats<F: Scalar>(channels: ArrayView2<F>, mode: CenterMode) -> Result<NormStats> {
    let mut center = Vec::with_capacity(channels.nrows());
    let mut scale = Vec::with_capacity(channels.nrows());
    for (c, row) in channels.outer_iter().enumerate() {
        if row.len() < 2 {
            return Err(Error::EmptyChannel(c));
        }
        let values: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        center.push(match mode {
            CenterMode::Median => median(values),
            CenterMode::Mean => mean,
        });
        scale.push(var.sqrt());
    }
    Ok(NormStats { center, scale, mode })
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `(x - center) / max(scale, epsilon)` per channel.
pub fn normalize<F: Scalar>(epoch: &EpochMatrix<F>, stats: &NormStats, epsilon: f64) -> Result<EpochMatrix<F>> {
    let data = normalize_matrix(epoch.data().view(), stats, epsilon)?;
    Ok(EpochMatrix { data, sampling_hz: epoch.sampling_hz, epoch_seconds: epoch.epoch_seconds })
}

pub(crate) fn normalize_matrix<F: Scalar>(
    data: ArrayView2<F>,
    stats: &NormStats,
    epsilon: f64,
) -> Result<Array2<F>> {
    if stats.center.len() != data.nrows() || stats.scale.len() != data.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "stats for {} channels, epoch has {}",
            stats.center.len(),
            data.nrows()
        )));
    }
    let mut out = data.to_owned();
    for (c, mut row) in out.outer_iter_mut().enumerate() {
        let center = F::of(stats.center[c]);
        let denom = F::of(stats.scale[c].max(epsilon));
        row.mapv_inplace(|v| (v - center) / denom);
    }
    Ok(out)
}
