//! Shared encoder-decoder for masked pre-training plus the downstream head.
//!
//! All batch entry points stack several token sequences into one matrix so
//! the per-token linear maps run as single matrix products; attention and the
//! head convolutions respect sequence boundaries.

mod config;
mod decoder;
mod encoder;
mod head;
pub mod layers;

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;

pub use config::ModelConfig;
pub use decoder::Decoder;
pub use encoder::{Encoder, EncoderBlock, EncoderCache};
pub use head::Head;
pub use layers::Tensors;

use crate::error::{Error, Result};
use crate::losses::{
    cosine_rows, iccl_rows, mse_rows, total_pretrain_loss, weighted_bce_loss, weighted_ce_loss, IcclConfig,
    LossBreakdown, ReconTarget, SideRecon,
};
use crate::masking::{MaskPair, MaskSide};
use crate::rng::{derive_seed, Rng};
use crate::scalar::Scalar;
use crate::signal::{EpochMatrix, SegmentedEpoch};

/// Encoder output: one `d_model` token per subsegment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<F> {
    pub tokens: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
    pub head: Option<Head<F>>,
}

/// Per-term multipliers on the pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon_hat: f64,
    pub recon_bar: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon_hat: 1.0, recon_bar: 1.0, contrastive: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainObjective {
    pub recon_target: ReconTarget,
    pub iccl: IcclConfig,
    pub weights: LossWeights,
}

impl PretrainObjective {
    pub fn with_iccl(mut self, enabled: bool) -> Self {
        self.weights.contrastive = if enabled { 1.0 } else { 0.0 };
        self
    }
}

pub struct PretrainOutput<F> {
    pub breakdowns: Vec<LossBreakdown>,
    /// Batch mean of the weighted objective that the gradient refers to.
    pub objective: f64,
    /// Reconstruction token rows per item, `M` side then `1 - M` side.
    pub recon_hat: Vec<Array2<F>>,
    pub recon_bar: Vec<Array2<F>>,
    pub min_hinge_gap: f64,
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassObjective {
    /// Weighted multi-class cross entropy, one weight per category.
    MultiClass { weights: Vec<f64> },
    /// Weighted binary cross entropy on the probability of category 1.
    Binary { positive_weight: f64 },
}

pub struct ClassOutput<F> {
    pub probs: Array2<F>,
    pub loss: Option<f64>,
    pub features: Array2<F>,
}

/// `(C, n_patch * L')` epoch to `(n_patch, C * L')` token rows.
pub fn epoch_rows<F: Scalar>(x: ArrayView2<F>, n_patch: usize) -> Array2<F> {
    let (c, l) = x.dim();
    let lp = l / n_patch;
    Array2::from_shape_fn((n_patch, c * lp), |(i, j)| x[[j / lp, i * lp + j % lp]])
}

/// Inverse of [`epoch_rows`].
pub fn rows_epoch<F: Scalar>(rows: ArrayView2<F>, channels: usize) -> Array2<F> {
    let (n_patch, width) = rows.dim();
    let lp = width / channels;
    Array2::from_shape_fn((channels, n_patch * lp), |(c, t)| rows[[t / lp, c * lp + t % lp]])
}

fn masked_rows<F: Scalar>(rows: &Array2<F>, visible: &Array2<bool>, l_prime: usize) -> Array2<F> {
    let mut out = rows.clone();
    for ((i, c), vis) in visible.indexed_iter() {
        if !vis {
            out.slice_mut(ndarray::s![i, c * l_prime..(c + 1) * l_prime]).fill(F::zero());
        }
    }
    out
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh parameters; the head is created only when `with_head` is set.
    pub fn init(config: ModelConfig, seed: u64, with_head: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "model-init"));
        let encoder = Encoder::init(&mut rng, &config);
        let decoder = Decoder::init(&mut rng, &config);
        let head = if with_head {
            let mut head_rng = Rng::seed_from_u64(derive_seed(seed, "head-init"));
            Some(Head::init(&mut head_rng, &config))
        } else {
            None
        };
        Ok(Self { config, encoder, decoder, head })
    }

    /// Replaces any head with a fresh one for `num_classes` categories.
    pub fn attach_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.num_classes = num_classes;
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "head-init"));
        self.head = Some(Head::init(&mut rng, &cfg));
        self.config = cfg;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            head: self.head.as_ref().map(Head::zeros_like),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        self.encoder.tensors("encoder", &mut out);
        self.decoder.tensors("decoder", &mut out);
        if let Some(h) = &self.head {
            h.tensors("head", &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        self.encoder.tensors_mut("encoder", &mut out);
        self.decoder.tensors_mut("decoder", &mut out);
        if let Some(h) = &mut self.head {
            h.tensors_mut("head", &mut out);
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::init(self.config.clone(), 0, self.head.is_some()).expect("config already valid");
        for ((_, mut dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            dst.zip_mut_with(&src, |d, s| *d = G::of(s.to_f64_lossy()));
        }
        out
    }

    fn check_segmented(&self, x: &SegmentedEpoch<F>) -> Result<()> {
        let cfg = &self.config;
        if x.n_patch() != cfg.n_patch || x.channels() != cfg.c || x.l_prime() != cfg.l_prime {
            return Err(Error::ShapeMismatch(format!(
                "input ({} x {} x {}) vs model ({} x {} x {})",
                x.n_patch(),
                x.channels(),
                x.l_prime(),
                cfg.n_patch,
                cfg.c,
                cfg.l_prime
            )));
        }
        Ok(())
    }

    /// Linear token embedding plus positional table.
    pub fn embed(&self, segmented: &SegmentedEpoch<F>) -> Result<Array2<F>> {
        self.check_segmented(segmented)?;
        self.encoder.embed(segmented.to_token_rows().view(), &self.config)
    }

    pub fn encode(&self, tokens: Array2<F>) -> Result<FeatureSequence<F>> {
        if tokens.dim() != (self.config.n_patch, self.config.d_model) {
            return Err(Error::ShapeMismatch(format!("tokens {:?}", tokens.dim())));
        }
        let (tokens, _) = self.encoder.encode(tokens, &self.config, None)?;
        Ok(FeatureSequence { tokens })
    }

    /// Encoding plus the per-layer, per-head attention weights.
    pub fn encode_traced(&self, tokens: Array2<F>) -> Result<(FeatureSequence<F>, Vec<Vec<Array2<F>>>)> {
        let (tokens, cache) = self.encoder.encode(tokens, &self.config, None)?;
        let weights = (0..self.config.encoder_layers).map(|l| cache.attention(l, 0).to_vec()).collect();
        Ok((FeatureSequence { tokens }, weights))
    }

    pub fn decode(&self, features: &FeatureSequence<F>) -> Result<SegmentedEpoch<F>> {
        if features.tokens.ncols() != self.config.d_model {
            return Err(Error::ShapeMismatch(format!("features {:?}", features.tokens.dim())));
        }
        let (rows, _) = self.decoder.forward(features.tokens.view());
        SegmentedEpoch::from_token_rows(rows.view(), self.config.c)
    }

    pub fn head_forward(&self, features: &FeatureSequence<F>) -> Result<Vec<F>> {
        let head = self.head.as_ref().ok_or_else(|| Error::InvalidConfig("model has no head".into()))?;
        if features.tokens.ncols() != self.config.d_model || features.tokens.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!("features {:?}", features.tokens.dim())));
        }
        let cache = head.forward(features.tokens.view(), features.tokens.nrows(), 0.0, None);
        if cache.probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("head".into()));
        }
        Ok(cache.probs.row(0).to_vec())
    }

    /// Both masked views through the shared network, no dropout.
    pub fn forward_pretrain(
        &self,
        epoch: &EpochMatrix<F>,
        masks: &MaskPair,
        objective: &PretrainObjective,
    ) -> Result<(SegmentedEpoch<F>, SegmentedEpoch<F>, LossBreakdown)> {
        let out = self.pretrain_batch(&[epoch.data().view()], std::slice::from_ref(masks), objective, None, None)?;
        let hat = SegmentedEpoch::from_token_rows(out.recon_hat[0].view(), self.config.c)?;
        let bar = SegmentedEpoch::from_token_rows(out.recon_bar[0].view(), self.config.c)?;
        Ok((hat, bar, out.breakdowns.into_iter().next().expect("one item")))
    }

    /// Forward (and optionally backward) over a batch of epochs.
    ///
    /// When `grad` is given, the gradient of `objective` with respect to every
    /// encoder and decoder tensor is added into it.
    pub fn pretrain_batch(
        &self,
        epochs: &[ArrayView2<F>],
        masks: &[MaskPair],
        objective: &PretrainObjective,
        rng: Option<&mut Rng>,
        grad: Option<&mut ModelParams<F>>,
    ) -> Result<PretrainOutput<F>> {
        let cfg = &self.config;
        if epochs.len() != masks.len() || epochs.is_empty() {
            return Err(Error::DimensionMismatch(format!("{} epochs, {} masks", epochs.len(), masks.len())));
        }
        let (n, lp) = (cfg.n_patch, cfg.l_prime);
        let width = cfg.token_width();
        let mut targets = Vec::with_capacity(epochs.len());
        let mut input = Array2::zeros((2 * epochs.len() * n, width));
        let mut visibility = Vec::with_capacity(epochs.len());
        for (b, (x, m)) in epochs.iter().zip(masks).enumerate() {
            if x.dim() != (cfg.c, cfg.epoch_len()) || m.n_patch() != n || m.channels() != cfg.c {
                return Err(Error::ShapeMismatch(format!("epoch {:?} / mask {}x{}", x.dim(), m.n_patch(), m.channels())));
            }
            let rows = epoch_rows(*x, n);
            let vis = [m.visible(MaskSide::Hat), m.visible(MaskSide::Bar)];
            for (s, v) in vis.iter().enumerate() {
                let start = (2 * b + s) * n;
                input.slice_mut(ndarray::s![start..start + n, ..]).assign(&masked_rows(&rows, v, lp));
            }
            targets.push(rows);
            visibility.push(vis);
        }

        let tokens = self.encoder.embed(input.view(), cfg)?;
        let (features, enc_cache) = self.encoder.encode(tokens, cfg, rng)?;
        let (recon, dec_cache) = self.decoder.forward(features.view());

        let w = objective.weights;
        let inv_b = 1.0 / epochs.len() as f64;
        let mut d_recon = Array2::<F>::zeros(recon.dim());
        let mut breakdowns = Vec::with_capacity(epochs.len());
        let mut recon_hat = Vec::with_capacity(epochs.len());
        let mut recon_bar = Vec::with_capacity(epochs.len());
        let mut total_obj = 0.0;
        let mut min_gap = f64::INFINITY;
        let mut min_distance = f64::INFINITY;
        for (b, (target, vis)) in targets.iter().zip(&visibility).enumerate() {
            let hat_rows = ndarray::s![2 * b * n..(2 * b + 1) * n, ..];
            let bar_rows = ndarray::s![(2 * b + 1) * n..(2 * b + 2) * n, ..];
            let r_hat = recon.slice(hat_rows);
            let r_bar = recon.slice(bar_rows);
            let cells_hat = objective.recon_target.cells(&vis[0]);
            let cells_bar = objective.recon_target.cells(&vis[1]);
            let cos_hat = cosine_rows(r_hat, target.view(), cells_hat.view())?;
            let mse_hat = mse_rows(r_hat, target.view(), cells_hat.view())?;
            let cos_bar = cosine_rows(r_bar, target.view(), cells_bar.view())?;
            let mse_bar = mse_rows(r_bar, target.view(), cells_bar.view())?;
            let cl = iccl_rows(r_hat, r_bar, &objective.iccl)?;
            min_gap = min_gap.min(cl.min_hinge_gap.to_f64_lossy());
            min_distance = min_distance.min(cl.min_distance.to_f64_lossy());

            let side_hat = SideRecon::from_terms(&cos_hat, &mse_hat);
            let side_bar = SideRecon::from_terms(&cos_bar, &mse_bar);
            let l_cl = cl.value.to_f64_lossy();
            total_obj += inv_b
                * (w.recon_hat * 0.5 * side_hat.l_recon() + w.recon_bar * 0.5 * side_bar.l_recon() + w.contrastive * l_cl);
            breakdowns.push(total_pretrain_loss(&side_hat, &side_bar, l_cl));

            let scale_hat = F::of(inv_b * w.recon_hat * 0.5);
            let scale_bar = F::of(inv_b * w.recon_bar * 0.5);
            let scale_cl = F::of(inv_b * w.contrastive);
            {
                let mut d = d_recon.slice_mut(hat_rows);
                d.scaled_add(scale_hat, &cos_hat.grad);
                d.scaled_add(scale_hat, &mse_hat.grad);
                d.scaled_add(scale_cl, &cl.grad_a);
            }
            {
                let mut d = d_recon.slice_mut(bar_rows);
                d.scaled_add(scale_bar, &cos_bar.grad);
                d.scaled_add(scale_bar, &mse_bar.grad);
                d.scaled_add(scale_cl, &cl.grad_b);
            }
            recon_hat.push(r_hat.to_owned());
            recon_bar.push(r_bar.to_owned());
        }

        if let Some(grad) = grad {
            let d_features = self.decoder.backward(features.view(), &dec_cache, d_recon.view(), &mut grad.decoder);
            self.encoder.backward(&enc_cache, input.view(), d_features.view(), cfg, &mut grad.encoder);
        }
        Ok(PretrainOutput {
            breakdowns,
            objective: total_obj,
            recon_hat,
            recon_bar,
            min_hinge_gap: min_gap,
            min_distance,
        })
    }

    /// Unmasked epochs through encoder and head. With `targets`, the loss is
    /// evaluated and, if `grad` is given, backpropagated; the encoder is
    /// skipped in the backward pass when `train_encoder` is false.
    pub fn classify_batch(
        &self,
        epochs: &[ArrayView2<F>],
        targets: Option<(&[usize], &ClassObjective)>,
        mut rng: Option<&mut Rng>,
        grad: Option<&mut ModelParams<F>>,
        train_encoder: bool,
    ) -> Result<ClassOutput<F>> {
        let cfg = &self.config;
        let head = self.head.as_ref().ok_or_else(|| Error::InvalidConfig("model has no head".into()))?;
        let n = cfg.n_patch;
        let mut input = Array2::zeros((epochs.len() * n, cfg.token_width()));
        for (b, x) in epochs.iter().enumerate() {
            if x.dim() != (cfg.c, cfg.epoch_len()) {
                return Err(Error::ShapeMismatch(format!("epoch {:?}", x.dim())));
            }
            input.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&epoch_rows(*x, n));
        }
        let tokens = self.encoder.embed(input.view(), cfg)?;
        let (features, enc_cache) = self.encoder.encode(tokens, cfg, rng.as_deref_mut())?;
        let cache = head.forward(features.view(), n, cfg.dropout_rate, rng);
        if cache.probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("head".into()));
        }
        let Some((labels, objective)) = targets else {
            return Ok(ClassOutput { probs: cache.probs.clone(), loss: None, features });
        };
        let (loss, d_probs) = match objective {
            ClassObjective::MultiClass { weights } => {
                let out = weighted_ce_loss(cache.probs.view(), labels, weights)?;
                (out.value, out.grad)
            }
            ClassObjective::Binary { positive_weight } => {
                if head.num_classes() != 2 {
                    return Err(Error::LabelModeMismatch(format!("binary loss on a {}-way head", head.num_classes())));
                }
                if let Some(&label) = labels.iter().find(|&&y| y > 1) {
                    return Err(Error::LabelOutOfRange { label, k: 2 });
                }
                let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
                let out = weighted_bce_loss(cache.probs.column(1), &positive, *positive_weight)?;
                let mut d = Array2::zeros(cache.probs.dim());
                d.column_mut(1).assign(&out.grad.column(0));
                (out.value, d)
            }
        };
        if let Some(grad) = grad {
            let head_grad = grad.head.as_mut().ok_or_else(|| Error::InvalidConfig("gradient has no head".into()))?;
            let d_features = head.backward(features.view(), n, &cache, d_probs.view(), head_grad);
            if train_encoder {
                self.encoder.backward(&enc_cache, input.view(), d_features.view(), cfg, &mut grad.encoder);
            }
        }
        Ok(ClassOutput { probs: cache.probs.clone(), loss: Some(loss.to_f64_lossy()), features })
    }

    /// Encoder features of unmasked epochs, `(n_patch, d_model)` each.
    pub fn features(&self, epochs: &[ArrayView2<F>]) -> Result<Vec<FeatureSequence<F>>> {
        let cfg = &self.config;
        let n = cfg.n_patch;
        let mut input = Array2::zeros((epochs.len() * n, cfg.token_width()));
        for (b, x) in epochs.iter().enumerate() {
            if x.dim() != (cfg.c, cfg.epoch_len()) {
                return Err(Error::ShapeMismatch(format!("epoch {:?}", x.dim())));
            }
            input.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&epoch_rows(*x, n));
        }
        let tokens = self.encoder.embed(input.view(), cfg)?;
        let (features, _) = self.encoder.encode(tokens, cfg, None)?;
        Ok((0..epochs.len())
            .map(|b| FeatureSequence { tokens: features.slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned() })
            .collect())
    }
}
