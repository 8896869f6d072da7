use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};

use super::layers::{gelu, gelu_backward, Linear, Tensors};
use super::ModelConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Per-token MLP back to a full `(C, L')` subsegment, shared across positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<F> {
    pub hidden: Linear<F>,
    pub out: Linear<F>,
}

pub struct DecoderCache<F> {
    pre_act: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        Self {
            hidden: Linear::init(rng, cfg.d_model, cfg.decoder_hidden),
            out: Linear::init(rng, cfg.decoder_hidden, cfg.token_width()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }

    pub fn forward(&self, features: ArrayView2<F>) -> (Array2<F>, DecoderCache<F>) {
        let pre_act = self.hidden.forward(features);
        let act = gelu(&pre_act);
        let recon = self.out.forward(act.view());
        (recon, DecoderCache { pre_act, act })
    }

    pub fn backward(&self, features: ArrayView2<F>, cache: &DecoderCache<F>, d_recon: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let d_act = self.out.backward(cache.act.view(), d_recon, &mut grad.out);
        let d_pre = gelu_backward(&cache.pre_act, d_act.view());
        self.hidden.backward(features, d_pre.view(), &mut grad.hidden)
    }
}

impl<F: Scalar> Tensors<F> for Decoder<F> {
    fn tensors<'a>(&'a self, p: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.hidden.tensors(&format!("{p}.hidden"), out);
        self.out.tensors(&format!("{p}.out"), out);
    }
    fn tensors_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.hidden.tensors_mut(&format!("{p}.hidden"), out);
        self.out.tensors_mut(&format!("{p}.out"), out);
    }
}
