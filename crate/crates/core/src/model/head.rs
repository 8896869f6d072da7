//! Downstream feature-decomposing head: parallel temporal convolutions over
//! the token axis, 1x1 reduction, global average pooling, MLP, softmax.

use ndarray::{concatenate, s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};

use super::layers::{
    dropout_mask, gelu, gelu_backward, mean_pool, mean_pool_backward, softmax_rows, Conv1d, Linear, Tensors,
};
use super::ModelConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Head<F> {
    pub branches: Vec<Conv1d<F>>,
    /// 1x1 convolution over the concatenated branch outputs.
    pub reduce: Linear<F>,
    pub mlp_hidden: Linear<F>,
    pub mlp_out: Linear<F>,
}

pub struct HeadCache<F> {
    branch_pre: Vec<Array2<F>>,
    concat: Array2<F>,
    reduce_pre: Array2<F>,
    pooled: Array2<F>,
    mlp_pre: Array2<F>,
    mlp_act: Array2<F>,
    drop: Option<Array2<F>>,
    pub probs: Array2<F>,
}

impl<F: Scalar> Head<F> {
    pub fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let hc = cfg.head_channels;
        let branches: Vec<_> =
            cfg.head_branch_kernels.iter().map(|&k| Conv1d::init(rng, k, cfg.d_model, hc)).collect();
        let concat_width = hc * branches.len();
        Self {
            branches,
            reduce: Linear::init(rng, concat_width, hc),
            mlp_hidden: Linear::init(rng, hc, hc),
            mlp_out: Linear::init(rng, hc, cfg.num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            branches: self.branches.iter().map(Conv1d::zeros_like).collect(),
            reduce: self.reduce.zeros_like(),
            mlp_hidden: self.mlp_hidden.zeros_like(),
            mlp_out: self.mlp_out.zeros_like(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mlp_out.b.len()
    }

    /// `features` stacks sequences of `seq_len` tokens; returns one probability
    /// row per sequence.
    pub fn forward(&self, features: ArrayView2<F>, seq_len: usize, dropout: f64, rng: Option<&mut Rng>) -> HeadCache<F> {
        let branch_pre: Vec<Array2<F>> = self.branches.iter().map(|b| b.forward(features, seq_len)).collect();
        let acts: Vec<Array2<F>> = branch_pre.iter().map(gelu).collect();
        let views: Vec<_> = acts.iter().map(|a| a.view()).collect();
        let concat = concatenate(Axis(1), &views).expect("branches share row count");
        let reduce_pre = self.reduce.forward(concat.view());
        let reduced = gelu(&reduce_pre);
        let pooled = mean_pool(reduced.view(), seq_len);
        let mlp_pre = self.mlp_hidden.forward(pooled.view());
        let mlp_act = gelu(&mlp_pre);
        let drop = dropout_mask(mlp_act.dim(), dropout, rng);
        let mlp_in = match &drop {
            Some(m) => &mlp_act * m,
            None => mlp_act.clone(),
        };
        let logits = self.mlp_out.forward(mlp_in.view());
        let probs = softmax_rows(&logits);
        HeadCache { branch_pre, concat, reduce_pre, pooled, mlp_pre, mlp_act, drop, probs }
    }

    /// Takes the gradient on the probabilities, returns it on the features.
    pub fn backward(
        &self,
        features: ArrayView2<F>,
        seq_len: usize,
        cache: &HeadCache<F>,
        d_probs: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let d_logits = super::layers::softmax_backward(&cache.probs, d_probs);
        let mlp_in = match &cache.drop {
            Some(m) => &cache.mlp_act * m,
            None => cache.mlp_act.clone(),
        };
        let mut d_act = self.mlp_out.backward(mlp_in.view(), d_logits.view(), &mut grad.mlp_out);
        if let Some(m) = &cache.drop {
            d_act = d_act * m;
        }
        let d_pre = gelu_backward(&cache.mlp_pre, d_act.view());
        let d_pooled = self.mlp_hidden.backward(cache.pooled.view(), d_pre.view(), &mut grad.mlp_hidden);
        let d_reduced = mean_pool_backward(d_pooled.view(), seq_len);
        let d_reduce_pre = gelu_backward(&cache.reduce_pre, d_reduced.view());
        let d_concat = self.reduce.backward(cache.concat.view(), d_reduce_pre.view(), &mut grad.reduce);
        let hc = self.reduce.w.ncols();
        let mut d_features = Array2::zeros(features.dim());
        for (i, (branch, g)) in self.branches.iter().zip(grad.branches.iter_mut()).enumerate() {
            let d_act = d_concat.slice(s![.., i * hc..(i + 1) * hc]);
            let d_pre = gelu_backward(&cache.branch_pre[i], d_act);
            d_features += &branch.backward(features, d_pre.view(), seq_len, g);
        }
        d_features
    }
}

impl<F: Scalar> Tensors<F> for Head<F> {
    fn tensors<'a>(&'a self, p: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.tensors(&format!("{p}.branches.{i}"), out);
        }
        self.reduce.tensors(&format!("{p}.reduce"), out);
        self.mlp_hidden.tensors(&format!("{p}.mlp_hidden"), out);
        self.mlp_out.tensors(&format!("{p}.mlp_out"), out);
    }
    fn tensors_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.tensors_mut(&format!("{p}.branches.{i}"), out);
        }
        self.reduce.tensors_mut(&format!("{p}.reduce"), out);
        self.mlp_hidden.tensors_mut(&format!("{p}.mlp_hidden"), out);
        self.mlp_out.tensors_mut(&format!("{p}.mlp_out"), out);
    }
}

