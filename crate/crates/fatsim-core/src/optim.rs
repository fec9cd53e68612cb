//! Local optimizers (Adam, SGD) operating on flat parameter vectors.

use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec { kind: OptimKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerSpec { kind: OptimKind::Sgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0 }
    }
}

/// Optimizer with per-coordinate state sized to one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<f32>,
    v: Vec<f32>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, dim: usize) -> Self {
        let state = match spec.kind {
            OptimKind::Adam => dim,
            OptimKind::Sgd => 0,
        };
        Optimizer { spec, m: vec![0.0; state], v: vec![0.0; state], step_count: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        let range = 0..params.len();
        self.step_masked(params, grads, range);
    }

    /// Apply one update restricted to `range`; coordinates outside stay
    /// untouched (used to train a single layer with the rest frozen).
    pub fn step_masked(&mut self, params: &mut [f32], grads: &[f32], range: Range<usize>) {
        debug_assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        match self.spec.kind {
            OptimKind::Sgd => {
                let lr = self.spec.lr;
                for i in range {
                    params[i] = (params[i] as f64 - lr * grads[i] as f64) as f32;
                }
            }
            OptimKind::Adam => {
                let (b1, b2, eps, lr) =
                    (self.spec.beta1, self.spec.beta2, self.spec.eps, self.spec.lr);
                let bc1 = 1.0 - b1.powi(self.step_count as i32);
                let bc2 = 1.0 - b2.powi(self.step_count as i32);
                for i in range {
                    let g = grads[i] as f64;
                    let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
                    let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
                    self.m[i] = m as f32;
                    self.v[i] = v as f32;
                    let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    params[i] = (params[i] as f64 - update) as f32;
                }
            }
        }
    }
}
