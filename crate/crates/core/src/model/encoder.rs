//! Token embedding and the pre-norm self-attention stack.

use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD};

use super::layers::{dropout_mask, gelu, gelu_backward, softmax_rows, uniform, LayerNorm, LayerNormCache, Linear, Tensors};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<F> {
    pub ln1: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub out: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub embed: Linear<F>,
    /// `(n_patch, d_model)`
    pub pos: Array2<F>,
    pub blocks: Vec<EncoderBlock<F>>,
    pub ln_final: LayerNorm<F>,
}

struct BlockCache<F> {
    input: Array2<F>,
    ln1: LayerNormCache<F>,
    normed1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// One `(T, T)` matrix per (sequence, head), sequence-major.
    attn: Vec<Array2<F>>,
    context: Array2<F>,
    ln2: LayerNormCache<F>,
    normed2: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
    drop: Option<Array2<F>>,
}

pub struct EncoderCache<F> {
    input: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    ln_final: LayerNormCache<F>,
    seq_len: usize,
}

impl<F: Scalar> EncoderCache<F> {
    /// Attention weights of layer `layer` for sequence `seq`, one matrix per head.
    pub fn attention(&self, layer: usize, seq: usize) -> &[Array2<F>] {
        let block = &self.blocks[layer];
        let heads = block.attn.len() / (block.input.nrows() / self.seq_len);
        &block.attn[seq * heads..(seq + 1) * heads]
    }
}

impl<F: Scalar> EncoderBlock<F> {
    fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(d),
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            out: Linear::init(rng, d, d),
            ln2: LayerNorm::new(d),
            ff1: Linear::init(rng, d, cfg.feedforward_dim),
            ff2: Linear::init(rng, cfg.feedforward_dim, d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            out: self.out.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ff1: self.ff1.zeros_like(),
            ff2: self.ff2.zeros_like(),
        }
    }

    fn forward(
        &self,
        x: Array2<F>,
        seq_len: usize,
        heads: usize,
        dropout: f64,
        rng: Option<&mut Rng>,
    ) -> (Array2<F>, BlockCache<F>) {
        let (normed1, ln1) = self.ln1.forward(x.view());
        let q = self.query.forward(normed1.view());
        let k = self.key.forward(normed1.view());
        let v = self.value.forward(normed1.view());
        let d = x.ncols();
        let dh = d / heads;
        let scale = F::one() / F::of_usize(dh).sqrt();
        let mut context = Array2::zeros(x.dim());
        let mut attn = Vec::with_capacity(x.nrows() / seq_len * heads);
        for g in 0..x.nrows() / seq_len {
            let rows = g * seq_len..(g + 1) * seq_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let p = softmax_rows(&(qh.dot(&kh.t()) * scale));
                context.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                attn.push(p);
            }
        }
        let mid = &x + &self.out.forward(context.view());
        let (normed2, ln2) = self.ln2.forward(mid.view());
        let pre_act = self.ff1.forward(normed2.view());
        let act = gelu(&pre_act);
        let drop = dropout_mask(act.dim(), dropout, rng);
        let ff_in = match &drop {
            Some(m) => &act * m,
            None => act.clone(),
        };
        let y = &mid + &self.ff2.forward(ff_in.view());
        let cache = BlockCache { input: x, ln1, normed1, q, k, v, attn, context, ln2, normed2, pre_act, act, drop };
        (y, cache)
    }

    fn backward(&self, c: &BlockCache<F>, dy: Array2<F>, seq_len: usize, heads: usize, grad: &mut Self) -> Array2<F> {
        // feedforward branch
        let ff_in = match &c.drop {
            Some(m) => &c.act * m,
            None => c.act.clone(),
        };
        let mut d_act = self.ff2.backward(ff_in.view(), dy.view(), &mut grad.ff2);
        if let Some(m) = &c.drop {
            d_act = d_act * m;
        }
        let d_pre = gelu_backward(&c.pre_act, d_act.view());
        let d_normed2 = self.ff1.backward(c.normed2.view(), d_pre.view(), &mut grad.ff1);
        let d_mid = &dy + &self.ln2.backward(&c.ln2, d_normed2.view(), &mut grad.ln2);

        // attention branch
        let d_context = self.out.backward(c.context.view(), d_mid.view(), &mut grad.out);
        let d = c.input.ncols();
        let dh = d / heads;
        let scale = F::one() / F::of_usize(dh).sqrt();
        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for g in 0..c.input.nrows() / seq_len {
            let rows = g * seq_len..(g + 1) * seq_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &c.attn[g * heads + h];
                let d_ctx = d_context.slice(s![rows.clone(), cols.clone()]);
                let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&d_ctx));
                let dp = d_ctx.dot(&vh.t());
                let ds = super::layers::softmax_backward(p, dp.view()) * scale;
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        let mut d_normed1 = self.query.backward(c.normed1.view(), dq.view(), &mut grad.query);
        d_normed1 += &self.key.backward(c.normed1.view(), dk.view(), &mut grad.key);
        d_normed1 += &self.value.backward(c.normed1.view(), dv.view(), &mut grad.value);
        d_mid + self.ln1.backward(&c.ln1, d_normed1.view(), &mut grad.ln1)
    }
}

impl<F: Scalar> Tensors<F> for EncoderBlock<F> {
    fn tensors<'a>(&'a self, p: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.ln1.tensors(&format!("{p}.ln1"), out);
        self.query.tensors(&format!("{p}.query"), out);
        self.key.tensors(&format!("{p}.key"), out);
        self.value.tensors(&format!("{p}.value"), out);
        self.out.tensors(&format!("{p}.out"), out);
        self.ln2.tensors(&format!("{p}.ln2"), out);
        self.ff1.tensors(&format!("{p}.ff1"), out);
        self.ff2.tensors(&format!("{p}.ff2"), out);
    }
    fn tensors_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.ln1.tensors_mut(&format!("{p}.ln1"), out);
        self.query.tensors_mut(&format!("{p}.query"), out);
        self.key.tensors_mut(&format!("{p}.key"), out);
        self.value.tensors_mut(&format!("{p}.value"), out);
        self.out.tensors_mut(&format!("{p}.out"), out);
        self.ln2.tensors_mut(&format!("{p}.ln2"), out);
        self.ff1.tensors_mut(&format!("{p}.ff1"), out);
        self.ff2.tensors_mut(&format!("{p}.ff2"), out);
    }
}

impl<F: Scalar> Encoder<F> {
    pub fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let embed = Linear::init(rng, cfg.token_width(), d);
        let pos = uniform(rng, (cfg.n_patch, d), 1.0 / (d as f64).sqrt());
        let blocks = (0..cfg.encoder_layers).map(|_| EncoderBlock::init(rng, cfg)).collect();
        Self { embed, pos, blocks, ln_final: LayerNorm::new(d) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed.zeros_like(),
            pos: Array2::zeros(self.pos.dim()),
            blocks: self.blocks.iter().map(EncoderBlock::zeros_like).collect(),
            ln_final: self.ln_final.zeros_like(),
        }
    }

    /// Token rows `(S * n_patch, C * L')` to embedded tokens, positional
    /// table added per position when enabled.
    pub fn embed(&self, rows: ArrayView2<F>, cfg: &ModelConfig) -> Result<Array2<F>> {
        if rows.ncols() != cfg.token_width() || rows.nrows() % cfg.n_patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "token rows {:?} for n_patch {} and width {}",
                rows.dim(),
                cfg.n_patch,
                cfg.token_width()
            )));
        }
        let mut tokens = self.embed.forward(rows);
        if cfg.positional_encoding {
            for g in 0..rows.nrows() / cfg.n_patch {
                let mut seq = tokens.slice_mut(s![g * cfg.n_patch..(g + 1) * cfg.n_patch, ..]);
                seq += &self.pos;
            }
        }
        Ok(tokens)
    }

    /// Self-attention stack over embedded tokens.
    pub fn encode(
        &self,
        tokens: Array2<F>,
        cfg: &ModelConfig,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        let seq_len = cfg.n_patch;
        let input = tokens.clone();
        let mut h = tokens;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward(h, seq_len, cfg.attention_heads, cfg.dropout_rate, rng.as_deref_mut());
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(format!("encoder layer {i}")));
            }
            caches.push(cache);
            h = out;
        }
        let (features, ln_final) = self.ln_final.forward(h.view());
        Ok((features, EncoderCache { input, blocks: caches, ln_final, seq_len }))
    }

    /// Backpropagates through the stack and the embedding; `rows` are the
    /// original token rows given to [`Encoder::embed`].
    pub fn backward(&self, cache: &EncoderCache<F>, rows: ArrayView2<F>, d_features: ArrayView2<F>, cfg: &ModelConfig, grad: &mut Self) {
        let mut d = self.ln_final.backward(&cache.ln_final, d_features, &mut grad.ln_final);
        for (block, (bc, bg)) in self.blocks.iter().zip(cache.blocks.iter().zip(grad.blocks.iter_mut())).rev() {
            d = block.backward(bc, d, cache.seq_len, cfg.attention_heads, bg);
        }
        debug_assert_eq!(d.dim(), cache.input.dim());
        if cfg.positional_encoding {
            for g in 0..d.nrows() / cfg.n_patch {
                grad.pos += &d.slice(s![g * cfg.n_patch..(g + 1) * cfg.n_patch, ..]);
            }
        }
        self.embed.backward_params(rows, d.view(), &mut grad.embed);
    }
}

impl<F: Scalar> Tensors<F> for Encoder<F> {
    fn tensors<'a>(&'a self, p: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.embed.tensors(&format!("{p}.embed"), out);
        out.push((format!("{p}.pos"), self.pos.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.tensors(&format!("{p}.blocks.{i}"), out);
        }
        self.ln_final.tensors(&format!("{p}.ln_final"), out);
    }
    fn tensors_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.embed.tensors_mut(&format!("{p}.embed"), out);
        out.push((format!("{p}.pos"), self.pos.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.tensors_mut(&format!("{p}.blocks.{i}"), out);
        }
        self.ln_final.tensors_mut(&format!("{p}.ln_final"), out);
    }
}
