//! Pre-training and fine-tuning objectives, each returning its analytic
//! gradient alongside the value.
//!
//! Reconstructions and targets are handled as token rows `(N_patch, C * L')`
//! laid out channel-major, which is what the decoder emits; the
//! [`SegmentedEpoch`] entry points are thin wrappers over that layout.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{segment_matrix, EpochMatrix, SegmentedEpoch};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPSILON: f64 = 1e-12;

/// Tolerance on the row sums of a probability matrix.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-6;

/// Which cells the reconstruction terms are evaluated on, relative to the
/// side's mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconTarget {
    #[default]
    Visible,
    Hidden,
    All,
}

impl ReconTarget {
    /// Cells scored for a side whose visible cells are `visible`.
    pub fn cells(self, visible: &Array2<bool>) -> Array2<bool> {
        match self {
            ReconTarget::Visible => visible.clone(),
            ReconTarget::Hidden => visible.mapv(|b| !b),
            ReconTarget::All => visible.mapv(|_| true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcclConfig {
    pub margin_alpha: f64,
    /// Also anchor on the `1 - M` side and average both directions.
    #[serde(default)]
    pub symmetric: bool,
}

impl Default for IcclConfig {
    fn default() -> Self {
        Self { margin_alpha: 1.0, symmetric: false }
    }
}

impl IcclConfig {
    pub fn new(margin_alpha: f64) -> Result<Self> {
        if !(margin_alpha >= 0.0) || !margin_alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("margin alpha {margin_alpha} must be >= 0")));
        }
        Ok(Self { margin_alpha, symmetric: false })
    }
}

/// A channel-averaged reconstruction term.
#[derive(Debug, Clone)]
pub struct ChannelLoss<F> {
    pub value: F,
    /// `None` for channels with no scored cell; they are left out of `value`.
    pub per_channel: Vec<Option<F>>,
    /// Gradient with respect to the reconstruction token rows.
    pub grad: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct IcclLoss<F> {
    pub value: F,
    pub terms: Vec<F>,
    /// Smallest absolute hinge argument; gradients are unreliable near 0.
    pub min_hinge_gap: F,
    /// Smallest pairwise distance used, where the distance is not smooth.
    pub min_distance: F,
    pub grad_a: Array2<F>,
    pub grad_b: Array2<F>,
}

fn check_rows<F>(recon: ArrayView2<F>, target: ArrayView2<F>, cells: ArrayView2<bool>) -> Result<usize> {
    if recon.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            recon.dim(),
            target.dim()
        )));
    }
    let (n_patch, channels) = cells.dim();
    if n_patch != recon.nrows() || channels == 0 || recon.ncols() % channels != 0 {
        return Err(Error::DimensionMismatch(format!(
            "cell selection {:?} does not fit rows {:?}",
            cells.dim(),
            recon.dim()
        )));
    }
    Ok(recon.ncols() / channels)
}

/// Channel-level cosine loss on token rows.
///
/// For each channel, one minus the mean cosine similarity over its scored
/// subsegments; then the mean over channels that have any scored subsegment.
/// A zero-norm vector contributes a cosine of 0.
pub fn cosine_rows<F: Scalar>(
    recon: ArrayView2<F>,
    target: ArrayView2<F>,
    cells: ArrayView2<bool>,
) -> Result<ChannelLoss<F>> {
    let l_prime = check_rows(recon, target, cells)?;
    let (n_patch, channels) = cells.dim();
    let mut grad = Array2::zeros(recon.dim());
    let mut per_channel = vec![None; channels];
    let counts: Vec<usize> = (0..channels).map(|c| (0..n_patch).filter(|&n| cells[[n, c]]).count()).collect();
    let included = counts.iter().filter(|&&k| k > 0).count();
    if included == 0 {
        return Ok(ChannelLoss { value: F::zero(), per_channel, grad });
    }
    let inv_included = F::one() / F::of_usize(included);
    let mut total = F::zero();
    for c in 0..channels {
        if counts[c] == 0 {
            continue;
        }
        let inv_count = F::one() / F::of_usize(counts[c]);
        let cols = c * l_prime..(c + 1) * l_prime;
        let mut cos_sum = F::zero();
        for n in (0..n_patch).filter(|&n| cells[[n, c]]) {
            let r = recon.slice(s![n, cols.clone()]);
            let x = target.slice(s![n, cols.clone()]);
            let rr = r.dot(&r);
            let xx = x.dot(&x);
            if rr == F::zero() || xx == F::zero() {
                continue;
            }
            let (rn, xn) = (rr.sqrt(), xx.sqrt());
            let cos = r.dot(&x) / (rn * xn);
            cos_sum += cos;
            // d(1 - cos)/dr = -(x / (|r||x|) - cos * r / |r|^2)
            let scale = -inv_count * inv_included;
            let mut g = grad.slice_mut(s![n, cols.clone()]);
            g.scaled_add(scale / (rn * xn), &x);
            g.scaled_add(-scale * cos / rr, &r);
        }
        let channel_loss = F::one() - cos_sum * inv_count;
        per_channel[c] = Some(channel_loss);
        total += channel_loss;
    }
    Ok(ChannelLoss { value: total * inv_included, per_channel, grad })
}

/// Channel-level squared error on token rows: per channel the mean over its
/// scored time steps, then the mean over channels with any scored step.
pub fn mse_rows<F: Scalar>(recon: ArrayView2<F>, target: ArrayView2<F>, cells: ArrayView2<bool>) -> Result<ChannelLoss<F>> {
    let l_prime = check_rows(recon, target, cells)?;
    let (n_patch, channels) = cells.dim();
    let mut grad = Array2::zeros(recon.dim());
    let mut per_channel = vec![None; channels];
    let counts: Vec<usize> = (0..channels).map(|c| (0..n_patch).filter(|&n| cells[[n, c]]).count()).collect();
    let included = counts.iter().filter(|&&k| k > 0).count();
    if included == 0 {
        return Ok(ChannelLoss { value: F::zero(), per_channel, grad });
    }
    let inv_included = F::one() / F::of_usize(included);
    let mut total = F::zero();
    for c in 0..channels {
        if counts[c] == 0 {
            continue;
        }
        let inv_steps = F::one() / F::of_usize(counts[c] * l_prime);
        let cols = c * l_prime..(c + 1) * l_prime;
        let mut sq = F::zero();
        for n in (0..n_patch).filter(|&n| cells[[n, c]]) {
            let diff = &recon.slice(s![n, cols.clone()]) - &target.slice(s![n, cols.clone()]);
            sq += diff.dot(&diff);
            grad.slice_mut(s![n, cols.clone()]).scaled_add(F::of(2.0) * inv_steps * inv_included, &diff);
        }
        let channel_loss = sq * inv_steps;
        per_channel[c] = Some(channel_loss);
        total += channel_loss;
    }
    Ok(ChannelLoss { value: total * inv_included, per_channel, grad })
}

pub fn cosine_recon_loss<F: Scalar>(
    recon: &SegmentedEpoch<F>,
    target: &SegmentedEpoch<F>,
    visible: ArrayView2<bool>,
) -> Result<ChannelLoss<F>> {
    if recon.n_patch() != target.n_patch() || recon.channels() != target.channels() || recon.l_prime() != target.l_prime() {
        return Err(Error::DimensionMismatch("segmented reconstruction and target differ".into()));
    }
    cosine_rows(recon.to_token_rows().view(), target.to_token_rows().view(), visible)
}

/// `visible` is `(N_patch, C)`; the epoch length must divide into `N_patch`.
pub fn mse_recon_loss<F: Scalar>(
    recon: &EpochMatrix<F>,
    target: &EpochMatrix<F>,
    visible: ArrayView2<bool>,
) -> Result<ChannelLoss<F>> {
    if recon.data().dim() != target.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            recon.data().dim(),
            target.data().dim()
        )));
    }
    if visible.ncols() != recon.channels() {
        return Err(Error::DimensionMismatch("visibility channel count differs from epoch".into()));
    }
    let n_patch = visible.nrows();
    let r = segment_matrix(recon.data().view(), n_patch)?;
    let x = segment_matrix(target.data().view(), n_patch)?;
    mse_rows(r.to_token_rows().view(), x.to_token_rows().view(), visible)
}

/// Inter-channel triplet objective on flattened subsegments.
///
/// Anchor `a_i`, positive `b_i`, negatives `a_j` for `j != i`:
/// `mean_i max(0, d(a_i, b_i) - mean_{j != i} d(a_i, a_j) + alpha)`.
pub fn iccl_rows<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>, cfg: &IcclConfig) -> Result<IcclLoss<F>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("anchor rows {:?} vs positive rows {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 2 {
        return Err(Error::TooFewPatches(a.nrows()));
    }
    if !cfg.symmetric {
        return iccl_one_way(a, b, cfg.margin_alpha);
    }
    let fwd = iccl_one_way(a, b, cfg.margin_alpha)?;
    let rev = iccl_one_way(b, a, cfg.margin_alpha)?;
    let half = F::of(0.5);
    Ok(IcclLoss {
        value: half * (fwd.value + rev.value),
        terms: fwd.terms.iter().zip(&rev.terms).map(|(x, y)| half * (*x + *y)).collect(),
        min_hinge_gap: fwd.min_hinge_gap.min(rev.min_hinge_gap),
        min_distance: fwd.min_distance.min(rev.min_distance),
        grad_a: (&fwd.grad_a + &rev.grad_b) * half,
        grad_b: (&fwd.grad_b + &rev.grad_a) * half,
    })
}

fn iccl_one_way<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>, alpha: f64) -> Result<IcclLoss<F>> {
    let n = a.nrows();
    let alpha = F::of(alpha);
    let mut dist = Array2::<F>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &a.row(i) - &a.row(j);
            let d = diff.dot(&diff).sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let inv_n = F::one() / F::of_usize(n);
    let inv_neg = F::one() / F::of_usize(n - 1);
    let mut grad_a = Array2::zeros(a.dim());
    let mut grad_b = Array2::zeros(b.dim());
    let mut terms = Vec::with_capacity(n);
    let mut min_gap = F::infinity();
    let mut min_distance = F::infinity();
    for i in 0..n {
        let pos_diff: Array1<F> = &a.row(i) - &b.row(i);
        let d_pos = pos_diff.dot(&pos_diff).sqrt();
        let d_neg = (0..n).filter(|&j| j != i).map(|j| dist[[i, j]]).sum::<F>() * inv_neg;
        let arg = d_pos - d_neg + alpha;
        min_gap = min_gap.min(arg.abs());
        min_distance = min_distance.min(d_pos);
        (0..n).filter(|&j| j != i).for_each(|j| min_distance = min_distance.min(dist[[i, j]]));
        if arg <= F::zero() {
            terms.push(F::zero());
            continue;
        }
        terms.push(arg);
        if d_pos > F::zero() {
            let g = pos_diff.mapv(|v| v * inv_n / d_pos);
            grad_a.row_mut(i).scaled_add(F::one(), &g);
            grad_b.row_mut(i).scaled_add(-F::one(), &g);
        }
        for j in (0..n).filter(|&j| j != i) {
            let d = dist[[i, j]];
            if d == F::zero() {
                continue;
            }
            let coeff = inv_n * inv_neg / d;
            let diff = &a.row(i) - &a.row(j);
            grad_a.row_mut(i).scaled_add(-coeff, &diff);
            grad_a.row_mut(j).scaled_add(coeff, &diff);
        }
    }
    let value = terms.iter().copied().sum::<F>() * inv_n;
    Ok(IcclLoss { value, terms, min_hinge_gap: min_gap, min_distance, grad_a, grad_b })
}

pub fn iccl_loss<F: Scalar>(recon_a: &SegmentedEpoch<F>, recon_b: &SegmentedEpoch<F>, cfg: &IcclConfig) -> Result<IcclLoss<F>> {
    if recon_a.n_patch() != recon_b.n_patch() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} subsegments",
            recon_a.n_patch(),
            recon_b.n_patch()
        )));
    }
    iccl_rows(recon_a.to_token_rows().view(), recon_b.to_token_rows().view(), cfg)
}

/// Per-side reconstruction values feeding [`total_pretrain_loss`].
#[derive(Debug, Clone, Default)]
pub struct SideRecon {
    pub l_cos: f64,
    pub l_mse: f64,
    pub per_channel_cos: Vec<Option<f64>>,
    pub per_channel_mse: Vec<Option<f64>>,
}

impl SideRecon {
    pub fn from_terms<F: Scalar>(cos: &ChannelLoss<F>, mse: &ChannelLoss<F>) -> Self {
        let conv = |v: &[Option<F>]| v.iter().map(|x| x.map(Scalar::to_f64_lossy)).collect();
        Self {
            l_cos: cos.value.to_f64_lossy(),
            l_mse: mse.value.to_f64_lossy(),
            per_channel_cos: conv(&cos.per_channel),
            per_channel_mse: conv(&mse.per_channel),
        }
    }

    pub fn l_recon(&self) -> f64 {
        self.l_cos + self.l_mse
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cos: f64,
    pub l_mse: f64,
    pub l_recon: f64,
    pub l_cl: f64,
    pub total: f64,
    pub per_channel_cos: Vec<f64>,
    pub per_channel_mse: Vec<f64>,
}

impl LossBreakdown {
    /// Mean of several breakdowns, field by field, in slice order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = items.first() else {
            return LossBreakdown::default();
        };
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| {
            (0..f(first).len()).map(|c| items.iter().map(|b| f(b)[c]).sum::<f64>() / n).collect()
        };
        let l_cos = avg(&|b| b.l_cos);
        let l_mse = avg(&|b| b.l_mse);
        let l_cl = avg(&|b| b.l_cl);
        let l_recon = l_cos + l_mse;
        LossBreakdown {
            l_cos,
            l_mse,
            l_recon,
            l_cl,
            total: l_recon + l_cl,
            per_channel_cos: avg_vec(&|b| &b.per_channel_cos),
            per_channel_mse: avg_vec(&|b| &b.per_channel_mse),
        }
    }
}

/// Combines both sides' reconstruction terms with the contrastive term.
///
/// Reconstruction values are the mean of the two sides; per-channel entries
/// average over the sides on which the channel was scored (0 if neither).
pub fn total_pretrain_loss(hat: &SideRecon, bar: &SideRecon, l_cl: f64) -> LossBreakdown {
    let l_cos = 0.5 * (hat.l_cos + bar.l_cos);
    let l_mse = 0.5 * (hat.l_mse + bar.l_mse);
    let l_recon = l_cos + l_mse;
    let merge = |a: &[Option<f64>], b: &[Option<f64>]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => 0.5 * (x + y),
                (Some(v), None) | (None, Some(v)) => *v,
                (None, None) => 0.0,
            })
            .collect()
    };
    LossBreakdown {
        l_cos,
        l_mse,
        l_recon,
        l_cl,
        total: l_recon + l_cl,
        per_channel_cos: merge(&hat.per_channel_cos, &bar.per_channel_cos),
        per_channel_mse: merge(&hat.per_channel_mse, &bar.per_channel_mse),
    }
}

#[derive(Debug, Clone)]
pub struct ClassLoss<F> {
    pub value: F,
    /// Gradient with respect to the probabilities.
    pub grad: Array2<F>,
}

fn check_stochastic<F: Scalar>(probs: ArrayView2<F>) -> Result<()> {
    for (row, p) in probs.outer_iter().enumerate() {
        let sum: f64 = p.iter().map(|v| v.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE || p.iter().any(|v| *v < F::zero()) {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// `-(1/N) sum_i w_{y_i} log p_{i, y_i}` with `p` clamped below at
/// [`PROB_EPSILON`]. Labels are category indices (the one-hot positions).
pub fn weighted_ce_loss<F: Scalar>(probs: ArrayView2<F>, labels: &[usize], weights: &[f64]) -> Result<ClassLoss<F>> {
    let (n, k) = probs.dim();
    if labels.len() != n || weights.len() != k || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{n}x{k} probabilities, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label, k });
    }
    check_stochastic(probs)?;
    let eps = F::of(PROB_EPSILON);
    let inv_n = F::one() / F::of_usize(n);
    let mut grad = Array2::zeros((n, k));
    let mut total = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let w = F::of(weights[y]);
        let p = probs[[i, y]];
        total += w * p.max(eps).ln();
        if p > eps {
            grad[[i, y]] = -w * inv_n / p;
        }
    }
    Ok(ClassLoss { value: -total * inv_n, grad })
}

/// `-(1/N) sum_i [w_pos y_i log p_i + (1 - y_i) log(1 - p_i)]`, both logs
/// clamped at [`PROB_EPSILON`]. Gradient is returned as an `(N, 1)` matrix.
pub fn weighted_bce_loss<F: Scalar>(probs: ArrayView1<F>, labels: &[bool], positive_weight: f64) -> Result<ClassLoss<F>> {
    let n = probs.len();
    if labels.len() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!("{n} probabilities, {} labels", labels.len())));
    }
    let eps = F::of(PROB_EPSILON);
    let w = F::of(positive_weight);
    let inv_n = F::one() / F::of_usize(n);
    let mut grad = Array2::zeros((n, 1));
    let mut total = F::zero();
    for (i, (&p, &y)) in probs.iter().zip(labels).enumerate() {
        if y {
            total += w * p.max(eps).ln();
            if p > eps {
                grad[[i, 0]] = -w * inv_n / p;
            }
        } else {
            let q = F::one() - p;
            total += q.max(eps).ln();
            if q > eps {
                grad[[i, 0]] = inv_n / q;
            }
        }
    }
    Ok(ClassLoss { value: -total * inv_n, grad })
}
