//! Plain SGD and adaptive-moment updates over a model's named tensors.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdaptiveMoment, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

pub struct Optimizer<F> {
    cfg: OptimizerConfig,
    first: Vec<ArrayD<F>>,
    second: Vec<ArrayD<F>>,
    steps: i32,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    /// Updates every tensor whose name `trainable` accepts.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, trainable: impl Fn(&str) -> bool) {
        let grads = grads.named_tensors();
        let mut params = params.named_tensors_mut();
        assert_eq!(params.len(), grads.len(), "parameter and gradient layouts differ");
        if self.first.len() != params.len() {
            self.first = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let lr = F::of(self.cfg.learning_rate);
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for ((name, p), (_, g)) in params.iter_mut().zip(&grads) {
                    if trainable(name) {
                        p.scaled_add(-lr, g);
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let (b1, b2) = (F::of(self.cfg.beta1), F::of(self.cfg.beta2));
                let eps = F::of(self.cfg.epsilon);
                let c1 = F::one() - b1.powi(self.steps);
                let c2 = F::one() - b2.powi(self.steps);
                for (i, ((name, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
                    if !trainable(name) {
                        continue;
                    }
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
                }
            }
        }
    }
}

pub fn global_norm<F: Scalar>(grads: &ModelParams<F>) -> f64 {
    grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to `max_norm` when its global norm exceeds it. Returns
/// the pre-clip norm and whether clipping happened.
pub fn clip_global_norm<F: Scalar>(grads: &mut ModelParams<F>, max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if max_norm <= 0.0 || norm <= max_norm || !norm.is_finite() {
        return (norm, false);
    }
    let k = F::of(max_norm / norm);
    for (_, mut t) in grads.named_tensors_mut() {
        t.mapv_inplace(|v| v * k);
    }
    (norm, true)
}
