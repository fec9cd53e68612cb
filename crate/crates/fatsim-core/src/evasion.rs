//! Inference-time evasion attacks: untargeted L-infinity PGD (training and
//! evaluation variants, random restarts), logit-scaled PGD for
//! gradient-masking detection, and black-box transfer evaluation.

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::data::Dataset;
use crate::nn::{ModelParams, NnError};
use crate::seed;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvasionError {
    #[error("invalid pgd config: {0}")]
    BadConfig(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("attack input outside [0,1]")]
    InputOutOfRange,
    #[error("surrogate and target models are incompatible: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// L-infinity PGD attack parameters. `epsilon` and `step_size` are in pixel
/// units; `logit_scale_t` divides the logits before the attack loss to
/// sidestep temperature-flattened softmax gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default = "yes")]
    pub random_init: bool,
    #[serde(default)]
    pub logit_scale_t: Option<f64>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl PgdConfig {
    /// Paper-style MNIST evaluation attack: eps 0.3, 40 steps of 0.01.
    pub fn mnist_eval() -> Self {
        PgdConfig {
            epsilon: 0.3,
            step_size: 0.01,
            steps: 40,
            restarts: 1,
            random_init: true,
            logit_scale_t: None,
        }
    }

    pub fn with_logit_scale(mut self, t: f64) -> Self {
        self.logit_scale_t = Some(t);
        self
    }

    pub fn validate(&self) -> Result<(), EvasionError> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(EvasionError::BadConfig(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(EvasionError::BadConfig(format!(
                "step_size {} must be >= 0",
                self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(EvasionError::BadConfig("steps must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(EvasionError::BadConfig("restarts must be >= 1".into()));
        }
        if let Some(t) = self.logit_scale_t {
            if !t.is_finite() || t <= 0.0 {
                return Err(EvasionError::BadConfig(format!("logit_scale_t {t} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Input gradient of the attack loss (cross-entropy on the true labels,
/// optionally on logits divided by `logit_scale_t`).
fn input_gradient(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    logit_scale_t: Option<f64>,
) -> Result<Vec<f32>, EvasionError> {
    let mut g = Graph::new();
    let pids = params.insert_leaves(&mut g, false);
    let xid = g.leaf(x.clone().requires_grad(true));
    let mut z = params.arch.forward(&mut g, &pids, xid)?;
    if let Some(t) = logit_scale_t {
        if t != 1.0 {
            z = g.scalar_mul(z, (1.0 / t) as f32);
        }
    }
    let loss = g.cross_entropy_logits(z, labels)?;
    g.backward(loss)?;
    Ok(g.grad(xid).expect("x requires grad").to_vec())
}

/// Per-sample cross-entropy and predicted class on a batch.
fn per_sample_loss_and_pred(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<usize>), EvasionError> {
    let logits = params.predict(x)?;
    let classes = *logits.shape.last().unwrap();
    let preds = ModelParams::argmax_rows(&logits);
    let mut losses = Vec::with_capacity(labels.len());
    for (row, &y) in logits.data.chunks(classes).zip(labels) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let lse: f64 = m as f64
            + row.iter().map(|&z| ((z - m).exp()) as f64).sum::<f64>().ln();
        losses.push(lse - row[y] as f64);
    }
    Ok((losses, preds))
}

/// Untargeted L-infinity PGD on a batch: iterate
/// `x <- clip(x + step_size * sign(grad_x loss))`, projecting into the
/// epsilon ball and then into [0, 1]. With several restarts, each sample
/// keeps the restart that fools the model, or the max-loss one if none does.
pub fn pgd_attack(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    seed_value: u64,
) -> Result<Tensor, EvasionError> {
    cfg.validate()?;
    if x.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(EvasionError::InputOutOfRange);
    }
    let eps = cfg.epsilon as f32;
    let step = cfg.step_size as f32;
    let n = x.shape[0];
    let px = x.data.len() / n;

    let mut best: Option<(Vec<f32>, Vec<bool>, Vec<f64>)> = None;
    for restart in 0..cfg.restarts {
        let mut adv = x.data.clone();
        if cfg.random_init && eps > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0x9d, restart as u64]));
            for (a, &orig) in adv.iter_mut().zip(&x.data) {
                let delta: f32 = rng.random_range(-eps..=eps);
                *a = (orig + delta).clamp(orig - eps, orig + eps).clamp(0.0, 1.0);
            }
        }
        let mut adv_t = Tensor { shape: x.shape.clone(), data: adv, requires_grad: false, grad: None };
        for _ in 0..cfg.steps {
            let grad = input_gradient(params, &adv_t, labels, cfg.logit_scale_t)?;
            for ((a, &g), &orig) in adv_t.data.iter_mut().zip(&grad).zip(&x.data) {
                let dir = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                // ball projection first, [0,1] clip last
                *a = (*a + step * dir).clamp(orig - eps, orig + eps).clamp(0.0, 1.0);
            }
        }
        let (losses, preds) = per_sample_loss_and_pred(params, &adv_t, labels)?;
        let fools: Vec<bool> = preds.iter().zip(labels).map(|(&p, &y)| p != y).collect();
        match &mut best {
            None => best = Some((adv_t.data, fools, losses)),
            Some((bdata, bfools, blosses)) => {
                for i in 0..n {
                    let better = (fools[i] && !bfools[i])
                        || (fools[i] == bfools[i] && losses[i] > blosses[i]);
                    if better {
                        bdata[i * px..(i + 1) * px].copy_from_slice(&adv_t.data[i * px..(i + 1) * px]);
                        bfools[i] = fools[i];
                        blosses[i] = losses[i];
                    }
                }
            }
        }
    }
    let (data, _, _) = best.expect("restarts >= 1");
    Ok(Tensor { shape: x.shape.clone(), data, requires_grad: false, grad: None })
}

/// PGD with the attack loss computed on logits / t; identical to
/// [`pgd_attack`] when t = 1.
pub fn logit_scaled_pgd(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    t: f64,
    seed_value: u64,
) -> Result<Tensor, EvasionError> {
    let scaled = cfg.with_logit_scale(t);
    pgd_attack(params, x, labels, &scaled, seed_value)
}

fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(batch)).map(|b| (b * batch, ((b + 1) * batch).min(n))).collect()
}

/// Clean and adversarial accuracy of `params` over a test set.
///
/// Batches fan out to worker threads; counts merge by batch index, so the
/// result is independent of thread count.
pub fn evaluate_robustness(
    params: &ModelParams,
    test: &Dataset,
    cfg: &PgdConfig,
    seed_value: u64,
    batch_size: usize,
) -> Result<(f64, f64), EvasionError> {
    if test.is_empty() {
        return Err(EvasionError::EmptyTestSet);
    }
    cfg.validate()?;
    let ranges = batch_ranges(test.len(), batch_size.max(1));
    let counts: Result<Vec<(usize, usize)>, EvasionError> = ranges
        .par_iter()
        .enumerate()
        .map(|(bi, &(lo, hi))| {
            let indices: Vec<usize> = (lo..hi).collect();
            let (x, y) = test.gather(&indices);
            let clean_preds = ModelParams::argmax_rows(&params.predict(&x)?);
            let clean = clean_preds.iter().zip(&y).filter(|(&p, &l)| p == l).count();
            let adv_x = pgd_attack(params, &x, &y, cfg, seed::derive(seed_value, &[bi as u64]))?;
            let adv_preds = ModelParams::argmax_rows(&params.predict(&adv_x)?);
            let adv = adv_preds.iter().zip(&y).filter(|(&p, &l)| p == l).count();
            Ok((clean, adv))
        })
        .collect();
    let counts = counts?;
    let clean: usize = counts.iter().map(|c| c.0).sum();
    let adv: usize = counts.iter().map(|c| c.1).sum();
    Ok((clean as f64 / test.len() as f64, adv as f64 / test.len() as f64))
}

/// Black-box transfer: craft adversarial examples on `surrogate` with PGD,
/// measure the fraction of them `target` still classifies correctly.
pub fn transfer_attack(
    surrogate: &ModelParams,
    target: &ModelParams,
    test: &Dataset,
    cfg: &PgdConfig,
    seed_value: u64,
    batch_size: usize,
) -> Result<f64, EvasionError> {
    if test.is_empty() {
        return Err(EvasionError::EmptyTestSet);
    }
    if surrogate.arch.input != target.arch.input || surrogate.arch.classes != target.arch.classes {
        return Err(EvasionError::ModelMismatch(format!(
            "surrogate {:?}/{} vs target {:?}/{}",
            surrogate.arch.input, surrogate.arch.classes, target.arch.input, target.arch.classes
        )));
    }
    cfg.validate()?;
    let ranges = batch_ranges(test.len(), batch_size.max(1));
    let counts: Result<Vec<usize>, EvasionError> = ranges
        .par_iter()
        .enumerate()
        .map(|(bi, &(lo, hi))| {
            let indices: Vec<usize> = (lo..hi).collect();
            let (x, y) = test.gather(&indices);
            // same per-batch seed stream as evaluate_robustness, so
            // self-transfer reproduces the white-box attack exactly
            let adv_x = pgd_attack(surrogate, &x, &y, cfg, seed::derive(seed_value, &[bi as u64]))?;
            let preds = ModelParams::argmax_rows(&target.predict(&adv_x)?);
            Ok(preds.iter().zip(&y).filter(|(&p, &l)| p == l).count())
        })
        .collect();
    let correct: usize = counts?.iter().sum();
    Ok(correct as f64 / test.len() as f64)
}
