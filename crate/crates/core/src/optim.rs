//! First-order optimizers over [`Parameterized`] models.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{ParamKind, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Moment buffers are keyed by parameter position, so the
/// same model layout must be passed to every [`step`](Self::step).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every parameter of `model` whose kind is in
    /// `trainable`, reading gradients from the equally-shaped `grads`.
    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &M, trainable: &[ParamKind]) {
        self.steps += 1;
        let grads = grads.params();
        let params = model.params_mut();
        if self.first.is_empty() {
            self.first = grads
                .iter()
                .map(|(_, _, g)| Array2::zeros(g.raw_dim()))
                .collect();
            self.second = self.first.clone();
        }
        for (k, ((kind, _, p), (_, _, g))) in params.into_iter().zip(grads).enumerate() {
            if !trainable.contains(&kind) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-self.lr, g),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let lr = self.lr;
                    Zip::from(p)
                        .and(g)
                        .and(&mut self.first[k])
                        .and(&mut self.second[k])
                        .for_each(|p, &g, m, v| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }
}
