//! Malicious client behaviours: the mean-shift convergence attack and the
//! Krum-targeting distillation (gradient-masking) attack.

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::nn::{ModelParams, NnError};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::seed;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ByzantineError {
    #[error("convergence attack needs at least 2 colluder updates, got {0}")]
    TooFewColluders(usize),
    #[error("update length mismatch: {got} vs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("distillation aborted: {0}")]
    DistillationAborted(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Mean-shift convergence attack: colluders submit mu + k*sigma per
/// coordinate, estimated from their own honestly computed updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceAttackConfig {
    /// Signed multiplier on the per-coordinate standard deviation.
    pub sigma_shift: f64,
}

/// Distillation substitution attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationAttackConfig {
    /// Softmax temperature used for teacher training, soft labels, and
    /// student training.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Layer whose weights the student trains; defaults to the layer with
    /// the fewest weights.
    #[serde(default)]
    pub target_layer: Option<String>,
    #[serde(default = "default_epochs")]
    pub teacher_epochs: usize,
    #[serde(default = "default_epochs")]
    pub student_epochs: usize,
}

fn default_temperature() -> f64 {
    100.0
}
fn default_epochs() -> usize {
    2
}

impl Default for DistillationAttackConfig {
    fn default() -> Self {
        DistillationAttackConfig {
            temperature: default_temperature(),
            target_layer: None,
            teacher_epochs: default_epochs(),
            student_epochs: default_epochs(),
        }
    }
}

/// The vector every colluder submits: per coordinate, mean plus
/// `sigma_shift` population standard deviations of the colluders' own benign
/// updates.
pub fn convergence_attack_update(
    benign_colluder_updates: &[Vec<f32>],
    sigma_shift: f64,
) -> Result<Vec<f32>, ByzantineError> {
    let n = benign_colluder_updates.len();
    if n < 2 {
        return Err(ByzantineError::TooFewColluders(n));
    }
    let dim = benign_colluder_updates[0].len();
    for u in benign_colluder_updates {
        if u.len() != dim {
            return Err(ByzantineError::LengthMismatch { expected: dim, got: u.len() });
        }
    }
    let mut out = vec![0.0f32; dim];
    for (j, o) in out.iter_mut().enumerate() {
        let mut mean = 0.0f64;
        for u in benign_colluder_updates {
            mean += u[j] as f64;
        }
        mean /= n as f64;
        let mut var = 0.0f64;
        for u in benign_colluder_updates {
            let d = u[j] as f64 - mean;
            var += d * d;
        }
        var /= n as f64; // population variance
        *o = (mean + sigma_shift * var.sqrt()) as f32;
    }
    Ok(out)
}

/// Squared L2 distance from `update` to the mean of `references`
/// (diagnostic for how far an update sits from the benign crowd).
pub fn l2_proximity(update: &[f32], references: &[Vec<f32>]) -> Result<f64, ByzantineError> {
    if references.is_empty() {
        return Err(ByzantineError::TooFewColluders(0));
    }
    let dim = update.len();
    for r in references {
        if r.len() != dim {
            return Err(ByzantineError::LengthMismatch { expected: dim, got: r.len() });
        }
    }
    let mut dist = 0.0f64;
    for j in 0..dim {
        let mean: f64 =
            references.iter().map(|r| r[j] as f64).sum::<f64>() / references.len() as f64;
        let d = update[j] as f64 - mean;
        dist += d * d;
    }
    Ok(dist)
}

/// Iterate seeded shuffled minibatches of a shard.
fn epoch_batches(
    shard: &[usize],
    batch_size: usize,
    seed_value: u64,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order = shard.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    order.shuffle(&mut rng);
    let batch = batch_size.max(1);
    (0..order.len().div_ceil(batch))
        .map(move |b| order[b * batch..((b + 1) * batch).min(order.len())].to_vec())
        .collect::<Vec<_>>()
        .into_iter()
}

/// One full-model training pass with temperature-T hard-label loss.
fn train_teacher(
    global: &ModelParams,
    ds: &Dataset,
    shard: &[usize],
    cfg: &DistillationAttackConfig,
    opt_spec: &OptimizerSpec,
    batch_size: usize,
    seed_value: u64,
) -> Result<ModelParams, ByzantineError> {
    let mut teacher = global.clone();
    let mut flat = teacher.flatten();
    let mut opt = Optimizer::new(*opt_spec, flat.len());
    for epoch in 0..cfg.teacher_epochs {
        for batch in epoch_batches(shard, batch_size, seed::derive(seed_value, &[0x7e, epoch as u64]))
        {
            let (x, y) = ds.gather(&batch);
            let mut g = Graph::new();
            let pids = teacher.insert_leaves(&mut g, true);
            let xid = g.leaf(x);
            let z = teacher
                .arch
                .forward(&mut g, &pids, xid)
                .map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            let z = g.scalar_mul(z, (1.0 / cfg.temperature) as f32);
            let loss = g
                .cross_entropy_logits(z, &y)
                .map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            g.backward(loss).map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            let grads = teacher.collect_flat_grads(&g, &pids);
            opt.step(&mut flat, &grads);
            teacher.set_flat(&flat)?;
        }
    }
    Ok(teacher)
}

/// The distillation substitution update.
///
/// A teacher copy of the global weights is trained on the local shard with a
/// temperature-T softmax loss, then re-labels the shard with its
/// temperature-T soft outputs. A student copy trains only the target layer
/// against those soft labels (same temperature), and the submitted vector is
/// the global weights with just that layer replaced.
pub fn distillation_attack_update(
    global: &ModelParams,
    ds: &Dataset,
    shard: &[usize],
    cfg: &DistillationAttackConfig,
    opt_spec: &OptimizerSpec,
    batch_size: usize,
    seed_value: u64,
) -> Result<Vec<f32>, ByzantineError> {
    if shard.is_empty() {
        return Err(ByzantineError::DistillationAborted("empty local shard".into()));
    }
    let target = match &cfg.target_layer {
        Some(name) => name.clone(),
        None => global.smallest_layer(),
    };
    let range = global.layer_slice(&target)?;

    let teacher = train_teacher(global, ds, shard, cfg, opt_spec, batch_size, seed_value)?;

    // soft labels from the teacher, batched to bound graph memory
    let mut soft = vec![0.0f32; shard.len() * global.arch.classes];
    for (bi, batch) in shard.chunks(batch_size.max(1)).enumerate() {
        let (x, _) = ds.gather(batch);
        let probs = teacher.predict_probs(&x, cfg.temperature)?;
        let offset = bi * batch_size.max(1) * global.arch.classes;
        soft[offset..offset + probs.data.len()].copy_from_slice(&probs.data);
    }

    let mut student = global.clone();
    let mut flat = student.flatten();
    let mut opt = Optimizer::new(*opt_spec, flat.len());
    let trainable = |name: &str| name.starts_with(&format!("{target}."));
    for epoch in 0..cfg.student_epochs {
        // fixed shard order here: soft labels are indexed by shard position
        for (bi, batch) in shard.chunks(batch_size.max(1)).enumerate() {
            let (x, _) = ds.gather(batch);
            let offset = bi * batch_size.max(1) * global.arch.classes;
            let q = crate::autodiff::Tensor::new(
                vec![batch.len(), global.arch.classes],
                soft[offset..offset + batch.len() * global.arch.classes].to_vec(),
            )
            .map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            let mut g = Graph::new();
            let pids = student.insert_leaves_with(&mut g, trainable);
            let xid = g.leaf(x);
            let qid = g.leaf(q);
            let z = student
                .arch
                .forward(&mut g, &pids, xid)
                .map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            let z = g.scalar_mul(z, (1.0 / cfg.temperature) as f32);
            let loss = g
                .cross_entropy_soft(z, qid)
                .map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            g.backward(loss).map_err(|e| ByzantineError::DistillationAborted(e.to_string()))?;
            let grads = student.collect_flat_grads(&g, &pids);
            opt.step_masked(&mut flat, &grads, range.clone());
            student.set_flat(&flat)?;
        }
        let _ = epoch; // epochs advance optimizer state only
    }

    // submitted vector: global weights with only the target layer replaced
    let mut submitted = global.flatten();
    submitted[range.clone()].copy_from_slice(&flat[range]);
    Ok(submitted)
}
