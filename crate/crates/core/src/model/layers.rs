//! Differentiable building blocks. Each `forward` returns whatever the
//! matching `backward` needs; parameter gradients accumulate into a
//! same-shaped struct.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng as _;

use crate::rng::Rng;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter tensors in a fixed traversal order.
pub trait Tensors<F> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>);
}

pub(crate) fn uniform<F: Scalar>(rng: &mut Rng, shape: (usize, usize), bound: f64) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || F::of(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `(in, out)`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// Uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self { w: uniform(rng, (fan_in, fan_out), bound), b: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.dim()), b: Array1::zeros(self.b.len()) }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.w.t())
    }

    pub fn backward_params(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl<F: Scalar> Tensors<F> for Linear<F> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((format!("{prefix}.w"), self.w.view().into_dyn()));
        out.push((format!("{prefix}.b"), self.b.view().into_dyn()));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((format!("{prefix}.w"), self.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.b"), self.b.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: Array1::zeros(self.gamma.len()), beta: Array1::zeros(self.beta.len()) }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::of_usize(x.ncols());
        let eps = F::of(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *is = F::one() / (var + eps).sqrt();
            let k = *is;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = F::of_usize(dy.ncols());
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), is) in dx.outer_iter_mut().zip(cache.xhat.outer_iter()).zip(cache.inv_std.iter()) {
            let mean_g = row.sum() / d;
            let mean_gx = row.dot(&xh) / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = (*g - mean_g - x * mean_gx) * *is);
        }
        dx
    }
}

impl<F: Scalar> Tensors<F> for LayerNorm<F> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

// tanh approximation
pub fn gelu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(gelu_scalar)
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

pub fn gelu_backward<F: Scalar>(x: &Array2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(x).for_each(|g, &x| {
        let inner = c * (x + k * x * x * x);
        let t = inner.tanh();
        let d_inner = c * (F::one() + F::of(3.0) * k * x * x);
        *g *= half * (F::one() + t) + half * x * (F::one() - t * t) * d_inner;
    });
    dx
}

/// Inverted dropout; the returned mask already carries the `1/(1-p)` scale.
pub fn dropout_mask<F: Scalar>(shape: (usize, usize), rate: f64, rng: Option<&mut Rng>) -> Option<Array2<F>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - rate));
    Some(Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < rate { F::zero() } else { keep }))
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    let mut p = z.to_owned();
    for mut row in p.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Pull a gradient on softmax outputs back to the logits.
pub fn softmax_backward<F: Scalar>(p: &Array2<F>, dp: ArrayView2<F>) -> Array2<F> {
    let mut dz = Array2::zeros(p.dim());
    for ((mut out, pr), gr) in dz.outer_iter_mut().zip(p.outer_iter()).zip(dp.outer_iter()) {
        let dot = pr.dot(&gr);
        Zip::from(&mut out).and(&pr).and(&gr).for_each(|o, &p, &g| *o = p * (g - dot));
    }
    dz
}

/// 1-D convolution along the row (token) axis of each sequence in a stack of
/// equal-length sequences, zero "same" padding, odd kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<F> {
    /// `(kernel, in, out)`
    pub w: Array3<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Conv1d<F> {
    pub fn init(rng: &mut Rng, kernel: usize, c_in: usize, c_out: usize) -> Self {
        let bound = 1.0 / ((kernel * c_in) as f64).sqrt();
        let w = Array3::from_shape_simple_fn((kernel, c_in, c_out), || F::of(rng.gen_range(-bound..=bound)));
        Self { w, b: Array1::zeros(c_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array3::zeros(self.w.dim()), b: Array1::zeros(self.b.len()) }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().0
    }

    /// Valid (out_row_range, in_row_offset) pairs for tap `j` in a sequence of `t` rows.
    fn tap_range(&self, j: usize, t: usize) -> Option<(usize, usize, isize)> {
        let shift = j as isize - (self.kernel() / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (t as isize - shift).min(t as isize);
        if hi <= lo as isize {
            return None;
        }
        Some((lo, hi as usize, shift))
    }

    pub fn forward(&self, x: ArrayView2<F>, seq_len: usize) -> Array2<F> {
        let c_out = self.b.len();
        let mut y = Array2::zeros((x.nrows(), c_out));
        y += &self.b;
        for g in 0..x.nrows() / seq_len {
            let base = g * seq_len;
            for j in 0..self.kernel() {
                let Some((lo, hi, shift)) = self.tap_range(j, seq_len) else { continue };
                let src_lo = (base + lo) as isize + shift;
                let src = x.slice(s![src_lo as usize..src_lo as usize + (hi - lo), ..]);
                let mut dst = y.slice_mut(s![base + lo..base + hi, ..]);
                ndarray::linalg::general_mat_mul(F::one(), &src, &self.w.index_axis(Axis(0), j), F::one(), &mut dst);
            }
        }
        y
    }

    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, seq_len: usize, grad: &mut Self) -> Array2<F> {
        grad.b += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.dim());
        for g in 0..x.nrows() / seq_len {
            let base = g * seq_len;
            for j in 0..self.kernel() {
                let Some((lo, hi, shift)) = self.tap_range(j, seq_len) else { continue };
                let src_lo = ((base + lo) as isize + shift) as usize;
                let src_rows = s![src_lo..src_lo + (hi - lo), ..];
                let dy_rows = dy.slice(s![base + lo..base + hi, ..]);
                let mut gw = grad.w.index_axis_mut(Axis(0), j);
                ndarray::linalg::general_mat_mul(F::one(), &x.slice(src_rows).t(), &dy_rows, F::one(), &mut gw);
                let mut dxs = dx.slice_mut(src_rows);
                ndarray::linalg::general_mat_mul(
                    F::one(),
                    &dy_rows,
                    &self.w.index_axis(Axis(0), j).t(),
                    F::one(),
                    &mut dxs,
                );
            }
        }
        dx
    }
}

impl<F: Scalar> Tensors<F> for Conv1d<F> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((format!("{prefix}.w"), self.w.view().into_dyn()));
        out.push((format!("{prefix}.b"), self.b.view().into_dyn()));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((format!("{prefix}.w"), self.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.b"), self.b.view_mut().into_dyn()));
    }
}

/// Mean over each sequence's rows: `(G*T, d) -> (G, d)`.
pub fn mean_pool<F: Scalar>(x: ArrayView2<F>, seq_len: usize) -> Array2<F> {
    let groups = x.nrows() / seq_len;
    let inv = F::one() / F::of_usize(seq_len);
    let mut out = Array2::zeros((groups, x.ncols()));
    for (g, mut row) in out.outer_iter_mut().enumerate() {
        row.assign(&x.slice(s![g * seq_len..(g + 1) * seq_len, ..]).sum_axis(Axis(0)));
        row.mapv_inplace(|v| v * inv);
    }
    out
}

pub fn mean_pool_backward<F: Scalar>(dy: ArrayView2<F>, seq_len: usize) -> Array2<F> {
    let inv = F::one() / F::of_usize(seq_len);
    let mut dx = Array2::zeros((dy.nrows() * seq_len, dy.ncols()));
    for (g, row) in dy.outer_iter().enumerate() {
        for t in 0..seq_len {
            dx.row_mut(g * seq_len + t).assign(&row.mapv(|v| v * inv));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd<Fn1: FnMut(&Array2<f64>) -> f64>(x: &Array2<f64>, mut f: Fn1) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = Rng::seed_from_u64(1);
        let x: Array2<f64> = uniform(&mut rng, (3, 6), 2.0);
        let mut ln = LayerNorm::<f64>::new(6);
        ln.gamma = uniform(&mut rng, (1, 6), 1.0).row(0).to_owned();
        let weights: Array2<f64> = uniform(&mut rng, (3, 6), 1.0);
        let loss = |x: &Array2<f64>| (&ln.forward(x.view()).0 * &weights).sum();
        let (_, cache) = ln.forward(x.view());
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, weights.view(), &mut g);
        close(&dx, &fd(&x, loss), 1e-6);
    }

    #[test]
    fn gelu_gradient() {
        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i as f64 - 0.7) * (j as f64 - 2.1));
        let dx = gelu_backward(&x, Array2::ones((2, 5)).view());
        close(&dx, &fd(&x, |x| gelu(x).sum()), 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Array2::from_shape_fn((4, 5), |(i, j)| (i * j) as f64 - 3.0);
        let p = softmax_rows(&z);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let w = Array2::from_shape_fn((4, 5), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let dz = softmax_backward(&p, w.view());
        close(&dz, &fd(&z, |z| (&softmax_rows(z) * &w).sum()), 1e-7);
    }

    #[test]
    fn conv_gradient_and_no_cross_sequence_leak() {
        let mut rng = Rng::seed_from_u64(4);
        let conv = Conv1d::<f64>::init(&mut rng, 5, 3, 2);
        let x: Array2<f64> = uniform(&mut rng, (8, 3), 1.0);
        let weights: Array2<f64> = uniform(&mut rng, (8, 2), 1.0);
        let mut g = conv.zeros_like();
        let dx = conv.backward(x.view(), weights.view(), 4, &mut g);
        close(&dx, &fd(&x, |x| (&conv.forward(x.view(), 4) * &weights).sum()), 1e-7);

        let mut x2 = x.clone();
        x2.row_mut(7).fill(100.0);
        let y1 = conv.forward(x.view(), 4);
        let y2 = conv.forward(x2.view(), 4);
        assert_eq!(y1.slice(s![0..4, ..]), y2.slice(s![0..4, ..]));
    }
}
