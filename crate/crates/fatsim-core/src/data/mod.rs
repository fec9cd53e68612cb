//! Dataset ingestion (IDX files, synthetic blobs) and client partitioning
//! (equal IID shards, Dirichlet label-skewed non-IID shards).

mod idx;

pub use idx::{load_cifar10_dir, load_idx, load_idx_dir};

use crate::autodiff::Tensor;
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("idx parse error in {path}: {detail}")]
    IdxFormat { path: String, detail: String },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label-skew partition failed after {0} retries (a client stayed empty)")]
    RetryBoundExceeded(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An in-memory labelled image dataset; pixels live in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [n, c, h, w]
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.images.shape[1], self.images.shape[2], self.images.shape[3])
    }

    /// Gather a batch tensor and label vector for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.sample_shape();
        let px = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        (
            Tensor { shape: vec![indices.len(), c, h, w], data, requires_grad: false, grad: None },
            labels,
        )
    }

    /// Keep the first `k` samples after a seeded shuffle (desk-scale runs).
    pub fn subset(&self, k: usize, seed_value: u64) -> Dataset {
        let k = k.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0x5b5]));
        order.shuffle(&mut rng);
        order.truncate(k);
        let (images, labels) = self.gather(&order);
        Dataset { images, labels, class_count: self.class_count }
    }
}

/// Per-client sample index lists over one dataset. Lists are disjoint and
/// their union covers the dataset exactly.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Equal-size IID shards from a seeded shuffle; shard sizes differ by at
/// most one.
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed_value: u64) -> Result<Partition, DataError> {
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be positive".into()));
    }
    if n_clients > ds.len() {
        return Err(DataError::InvalidArgument(format!(
            "n_clients {} exceeds dataset size {}",
            n_clients,
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0x11d]));
    order.shuffle(&mut rng);
    let mut shards = vec![Vec::with_capacity(ds.len() / n_clients + 1); n_clients];
    for (i, idx) in order.into_iter().enumerate() {
        shards[i % n_clients].push(idx);
    }
    Ok(Partition { shards })
}

const LABEL_SKEW_MAX_RETRIES: usize = 100;

/// Label-skewed non-IID shards: for every class, a Dirichlet(alpha) draw
/// allocates that class's samples across clients. Redraws (bounded) until
/// every client is nonempty.
pub fn partition_label_skew(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed_value: u64,
) -> Result<Partition, DataError> {
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be positive".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(DataError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients == 1 {
        return Ok(Partition { shards: vec![(0..ds.len()).collect()] });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| DataError::InvalidArgument(format!("dirichlet: {e}")))?;
    for attempt in 0..LABEL_SKEW_MAX_RETRIES {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xd14, attempt as u64]));
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut pool = class_indices.clone();
            pool.shuffle(&mut rng);
            // Dirichlet(alpha) via normalised Gamma draws
            let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = props.iter().sum();
            if total <= 0.0 || !total.is_finite() {
                props = vec![1.0; n_clients];
            }
            let counts = largest_remainder_counts(&props, pool.len());
            let mut offset = 0;
            for (client, &count) in counts.iter().enumerate() {
                shards[client].extend_from_slice(&pool[offset..offset + count]);
                offset += count;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(Partition { shards });
        }
    }
    Err(DataError::RetryBoundExceeded(LABEL_SKEW_MAX_RETRIES))
}

/// Round proportions to integer counts summing exactly to `total`
/// (largest-remainder method; deterministic).
fn largest_remainder_counts(props: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = props.iter().sum();
    let exact: Vec<f64> = props.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Gaussian blobs around per-class centroids, clipped to [0, 1];
/// linearly separable at the default spread. A fast unit-test dataset.
pub fn synthetic_blobs(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed_value: u64,
) -> Result<Dataset, DataError> {
    if n_classes == 0 || n_per_class == 0 || dim == 0 {
        return Err(DataError::InvalidArgument("blob sizes must be positive".into()));
    }
    if spread < 0.0 {
        return Err(DataError::InvalidArgument(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xb10b]));
    let centroids: Vec<Vec<f32>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.15..0.85)).collect())
        .collect();
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
    for (class, centroid) in centroids.iter().enumerate() {
        for _ in 0..n_per_class {
            for &center in centroid {
                let noise = normal.sample(&mut rng) * spread;
                let v = (center as f64 + noise).clamp(0.0, 1.0);
                data.push(v as f32);
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        images: Tensor { shape: vec![n, 1, 1, dim], data, requires_grad: false, grad: None },
        labels,
        class_count: n_classes,
    })
}

pub fn default_blob_spread() -> f64 {
    0.08
}
