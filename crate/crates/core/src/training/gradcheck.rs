//! Central finite-difference verification of every analytic gradient the
//! trainer relies on.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::masking::{generate_mask_pair_with, MaskPair};
use crate::model::{ClassObjective, LossWeights, ModelConfig, ModelParams, PretrainObjective};
use crate::rng::{derive_seed, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Instances whose hinge argument or any distance lies closer than this to
/// the non-smooth point are redrawn.
pub const KINK_EXCLUSION: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub component: String,
    pub tensor: String,
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)`
    pub rel_error: f64,
    pub max_abs_diff: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub redraws: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// A single scalar objective of the model with its analytic gradient.
trait Probe {
    fn eval(&self, params: &ModelParams<f64>, grad: Option<&mut ModelParams<f64>>) -> f64;
    /// False when the instance sits too close to a kink to be checked.
    fn smooth(&self, params: &ModelParams<f64>) -> bool;
}

struct PretrainProbe {
    epochs: Vec<Array2<f64>>,
    masks: Vec<MaskPair>,
    objective: PretrainObjective,
}

impl Probe for PretrainProbe {
    fn eval(&self, params: &ModelParams<f64>, grad: Option<&mut ModelParams<f64>>) -> f64 {
        let views: Vec<_> = self.epochs.iter().map(|e| e.view()).collect();
        params.pretrain_batch(&views, &self.masks, &self.objective, None, grad).expect("valid probe").objective
    }

    fn smooth(&self, params: &ModelParams<f64>) -> bool {
        let views: Vec<_> = self.epochs.iter().map(|e| e.view()).collect();
        let out = params.pretrain_batch(&views, &self.masks, &self.objective, None, None).expect("valid probe");
        out.min_distance > KINK_EXCLUSION
            && (self.objective.weights.contrastive == 0.0 || out.min_hinge_gap > KINK_EXCLUSION)
    }
}

struct ClassProbe {
    epochs: Vec<Array2<f64>>,
    labels: Vec<usize>,
    objective: ClassObjective,
}

impl Probe for ClassProbe {
    fn eval(&self, params: &ModelParams<f64>, grad: Option<&mut ModelParams<f64>>) -> f64 {
        let views: Vec<_> = self.epochs.iter().map(|e| e.view()).collect();
        params
            .classify_batch(&views, Some((&self.labels, &self.objective)), None, grad, true)
            .expect("valid probe")
            .loss
            .expect("targets given")
    }

    fn smooth(&self, _: &ModelParams<f64>) -> bool {
        true
    }
}

fn random_epochs(rng: &mut Rng, cfg: &ModelConfig, count: usize) -> Vec<Array2<f64>> {
    (0..count)
        .map(|_| Array2::from_shape_simple_fn((cfg.c, cfg.epoch_len()), || rng.gen_range(-1.5..1.5)))
        .collect()
}

fn check_probe(component: &str, probe: &dyn Probe, params: &ModelParams<f64>, out: &mut Vec<TensorCheck>) -> f64 {
    let mut analytic = params.zeros_like();
    probe.eval(params, Some(&mut analytic));
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut worst = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let len = params.named_tensors()[ti].1.len();
        let mut numeric = Vec::with_capacity(len);
        for k in 0..len {
            let mut plus = params.clone();
            let mut minus = params.clone();
            bump(&mut plus, ti, k, FD_STEP);
            bump(&mut minus, ti, k, -FD_STEP);
            numeric.push((probe.eval(&plus, None) - probe.eval(&minus, None)) / (2.0 * FD_STEP));
        }
        let a: Vec<f64> = analytic.named_tensors()[ti].1.iter().copied().collect();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na + nn < 1e-10 { diff } else { diff / (na + nn) };
        let max_abs = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(rel);
        out.push(TensorCheck {
            component: component.to_string(),
            tensor: name.clone(),
            rel_error: rel,
            max_abs_diff: max_abs,
            analytic_norm: na,
        });
    }
    worst
}

fn bump(params: &mut ModelParams<f64>, tensor: usize, index: usize, delta: f64) {
    let mut tensors = params.named_tensors_mut();
    let t = &mut tensors[tensor].1;
    let slot = t.iter_mut().nth(index).expect("index within tensor");
    *slot += delta;
}

/// Checks the pre-training objective (whole and by term) and both
/// classification objectives against central differences.
pub fn gradcheck(cfg: &ModelConfig, seed: u64) -> crate::Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.dropout_rate = 0.0;
    cfg.validate()?;
    let mut tensors = Vec::new();
    let mut components = Vec::new();

    let pretrain_variants = [
        ("pretrain_total", LossWeights::default()),
        ("recon", LossWeights { contrastive: 0.0, ..Default::default() }),
        ("iccl", LossWeights { recon_hat: 0.0, recon_bar: 0.0, contrastive: 1.0 }),
    ];
    for (name, weights) in pretrain_variants {
        let mut redraws = 0;
        let mut attempt = 0u64;
        let (params, probe) = loop {
            let mut rng = Rng::seed_from_u64(derive_seed(seed, &format!("gradcheck-{name}-{attempt}")));
            let params = ModelParams::<f64>::init(cfg.clone(), rng.gen(), false)?;
            let epochs = random_epochs(&mut rng, &cfg, 2);
            let masks =
                (0..2).map(|_| generate_mask_pair_with(cfg.c, cfg.n_patch, &mut rng)).collect::<crate::Result<Vec<_>>>()?;
            let objective = PretrainObjective { weights, ..Default::default() };
            let probe = PretrainProbe { epochs, masks, objective };
            if probe.smooth(&params) || attempt >= 20 {
                break (params, probe);
            }
            redraws += 1;
            attempt += 1;
        };
        let worst = check_probe(name, &probe, &params, &mut tensors);
        components.push(ComponentCheck { component: name.into(), max_rel_error: worst, redraws });
    }

    let mut rng = Rng::seed_from_u64(derive_seed(seed, "gradcheck-ce"));
    let params = ModelParams::<f64>::init(cfg.clone(), rng.gen(), true)?;
    let k = cfg.num_classes;
    let probe = ClassProbe {
        epochs: random_epochs(&mut rng, &cfg, 4),
        labels: (0..4).map(|i| i % k).collect(),
        objective: ClassObjective::MultiClass { weights: (0..k).map(|j| 0.5 + j as f64).collect() },
    };
    let worst = check_probe("weighted_ce", &probe, &params, &mut tensors);
    components.push(ComponentCheck { component: "weighted_ce".into(), max_rel_error: worst, redraws: 0 });

    let mut bin_cfg = cfg.clone();
    bin_cfg.num_classes = 2;
    let mut rng = Rng::seed_from_u64(derive_seed(seed, "gradcheck-bce"));
    let params = ModelParams::<f64>::init(bin_cfg.clone(), rng.gen(), true)?;
    let probe = ClassProbe {
        epochs: random_epochs(&mut rng, &bin_cfg, 4),
        labels: vec![1, 0, 0, 1],
        objective: ClassObjective::Binary { positive_weight: 2.5 },
    };
    let worst = check_probe("weighted_bce", &probe, &params, &mut tensors);
    components.push(ComponentCheck { component: "weighted_bce".into(), max_rel_error: worst, redraws: 0 });

    let passed = components.iter().all(|c| c.max_rel_error < GRADCHECK_TOLERANCE);
    Ok(GradcheckReport { tolerance: GRADCHECK_TOLERANCE, step: FD_STEP, tensors, components, passed })
}
