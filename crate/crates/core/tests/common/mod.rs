//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use psg_core::rng::rng_for;
use rand::Rng as _;

/// `seg[n][c][t]`
pub type Seg = Vec<Vec<Vec<f64>>>;

pub fn to_seg(rows: &Array2<f64>, channels: usize) -> Seg {
    let lp = rows.ncols() / channels;
    (0..rows.nrows())
        .map(|n| (0..channels).map(|c| (0..lp).map(|t| rows[[n, c * lp + t]]).collect()).collect())
        .collect()
}

pub fn from_seg(seg: &Seg) -> Array2<f64> {
    let (n, c, lp) = (seg.len(), seg[0].len(), seg[0][0].len());
    let mut rows = Array2::zeros((n, c * lp));
    for i in 0..n {
        for ch in 0..c {
            for t in 0..lp {
                rows[[i, ch * lp + t]] = seg[i][ch][t];
            }
        }
    }
    rows
}

pub fn cosine_oracle(r: &Seg, x: &Seg, scored: &[Vec<bool>]) -> f64 {
    let (n, c) = (r.len(), r[0].len());
    let mut channel_losses = Vec::new();
    for ch in 0..c {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            if !scored[i][ch] {
                continue;
            }
            let mut dot = 0.0;
            let mut rr = 0.0;
            let mut xx = 0.0;
            for t in 0..r[i][ch].len() {
                dot += r[i][ch][t] * x[i][ch][t];
                rr += r[i][ch][t] * r[i][ch][t];
                xx += x[i][ch][t] * x[i][ch][t];
            }
            let cos = if rr == 0.0 || xx == 0.0 { 0.0 } else { dot / (rr.sqrt() * xx.sqrt()) };
            sum += cos;
            count += 1;
        }
        if count > 0 {
            channel_losses.push(1.0 - sum / count as f64);
        }
    }
    if channel_losses.is_empty() {
        0.0
    } else {
        channel_losses.iter().sum::<f64>() / channel_losses.len() as f64
    }
}

pub fn mse_oracle(r: &Seg, x: &Seg, scored: &[Vec<bool>]) -> f64 {
    let (n, c) = (r.len(), r[0].len());
    let mut channel_losses = Vec::new();
    for ch in 0..c {
        let mut sum = 0.0;
        let mut steps = 0;
        for i in 0..n {
            if scored[i][ch] {
                for t in 0..r[i][ch].len() {
                    sum += (r[i][ch][t] - x[i][ch][t]).powi(2);
                    steps += 1;
                }
            }
        }
        if steps > 0 {
            channel_losses.push(sum / steps as f64);
        }
    }
    if channel_losses.is_empty() {
        0.0
    } else {
        channel_losses.iter().sum::<f64>() / channel_losses.len() as f64
    }
}

fn flat(s: &[Vec<f64>]) -> Vec<f64> {
    s.iter().flatten().copied().collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

pub fn iccl_oracle(a: &Seg, b: &Seg, alpha: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let ai = flat(&a[i]);
        let pos = dist(&ai, &flat(&b[i]));
        let mut neg = 0.0;
        for j in 0..n {
            if j != i {
                neg += dist(&ai, &flat(&a[j]));
            }
        }
        neg /= (n - 1) as f64;
        total += (pos - neg + alpha).max(0.0);
    }
    total / n as f64
}

pub fn ce_oracle(p: &[Vec<f64>], labels: &[usize], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, row) in p.iter().enumerate() {
        for (j, &pij) in row.iter().enumerate() {
            let y = if labels[i] == j { 1.0 } else { 0.0 };
            s += w[j] * y * pij.max(1e-12).ln();
        }
    }
    -s / p.len() as f64
}

pub fn bce_oracle(p: &[f64], y: &[bool], w_pos: f64) -> f64 {
    let mut s = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(1e-12, 1.0);
        let qc = (1.0 - pi).clamp(1e-12, 1.0);
        s += if yi { w_pos * pc.ln() } else { qc.ln() };
    }
    -s / p.len() as f64
}

pub fn tally_oracle(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut out = vec![vec![0u64; k]; k];
    for i in 0..k {
        for j in 0..k {
            out[i][j] = truth.iter().zip(pred).filter(|(&t, &p)| t == i && p == j).count() as u64;
        }
    }
    out
}

/// (accuracy, per-category (precision, recall, f1), macro f1) by the
/// zero-denominator conventions: no predictions -> precision 0, no support ->
/// category left out of the macro mean.
pub fn metric_oracle(cm: &[Vec<u64>]) -> (f64, Vec<(f64, Option<f64>, Option<f64>)>, f64) {
    let k = cm.len();
    let total: u64 = cm.iter().flatten().sum();
    let diag: u64 = (0..k).map(|j| cm[j][j]).sum();
    let mut cats = Vec::new();
    let mut f1s = Vec::new();
    for j in 0..k {
        let tp = cm[j][j] as f64;
        let predicted: u64 = (0..k).map(|i| cm[i][j]).sum();
        let support: u64 = cm[j].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        if support == 0 {
            cats.push((precision, None, None));
            continue;
        }
        let recall = tp / support as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        f1s.push(f1);
        cats.push((precision, Some(recall), Some(f1)));
    }
    (diag as f64 / total as f64, cats, f1s.iter().sum::<f64>() / f1s.len() as f64)
}

/// Random `(n, c, lp)` values; roughly one subsegment-channel in 20 is all zero.
pub fn random_seg(rng: &mut psg_core::rng::Rng, n: usize, c: usize, lp: usize) -> Seg {
    (0..n)
        .map(|_| {
            (0..c)
                .map(|_| {
                    if rng.gen_bool(0.05) {
                        vec![0.0; lp]
                    } else {
                        (0..lp).map(|_| rng.gen_range(-3.0..3.0)).collect()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn random_cells(rng: &mut psg_core::rng::Rng, n: usize, c: usize) -> Vec<Vec<bool>> {
    (0..n).map(|_| (0..c).map(|_| rng.gen_bool(0.6)).collect()).collect()
}

pub fn cells_array(cells: &[Vec<bool>]) -> Array2<bool> {
    Array2::from_shape_fn((cells.len(), cells[0].len()), |(i, c)| cells[i][c])
}

pub fn seeded(seed: u64) -> psg_core::rng::Rng {
    rng_for(seed, "test")
}
