//! Independent reference implementations used as test oracles.
//!
//! Everything here is written directly from the definitions, in f64, without
//! touching the library's graph or aggregation code paths.

#![allow(dead_code)]

use std::path::PathBuf;

// ------------------------------------------------------------- aggregation
// oracles (naive O(n^2 d) implementations)

/// Krum scores and winner: per update, sum of squared distances to its
/// n - f - 2 nearest neighbours; lowest score wins, ties to lowest id.
pub fn oracle_krum(vectors: &[(u64, Vec<f32>)], f: usize) -> (usize, Vec<f64>) {
    let n = vectors.len();
    let neighbours = n - f - 2;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = Vec::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: f64 = vectors[i]
                .1
                .iter()
                .zip(&vectors[j].1)
                .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                .sum();
            dists.push(d);
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.push(dists[..neighbours].iter().sum());
    }
    let mut best = 0;
    for i in 1..n {
        if scores[i] < scores[best]
            || (scores[i] == scores[best] && vectors[i].0 < vectors[best].0)
        {
            best = i;
        }
    }
    (best, scores)
}

/// Median of an even count is the lower middle value.
fn median_lower(values: &[f32]) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[(sorted.len() - 1) / 2]
}

/// Per coordinate: keep the `keep` values closest to the median (ties by
/// absolute distance, then smaller value, then lower client id), average.
fn trim_coordinate(values: &[(f32, u64)], keep: usize) -> f64 {
    let med = median_lower(&values.iter().map(|&(v, _)| v).collect::<Vec<_>>());
    let mut order = values.to_vec();
    order.sort_by(|a, b| {
        let da = (a.0 - med).abs();
        let db = (b.0 - med).abs();
        da.partial_cmp(&db)
            .unwrap()
            .then(a.0.partial_cmp(&b.0).unwrap())
            .then(a.1.cmp(&b.1))
    });
    order[..keep].iter().map(|&(v, _)| v as f64).sum::<f64>() / keep as f64
}

pub fn oracle_trimmed_mean(vectors: &[(u64, Vec<f32>)], f: usize) -> Vec<f64> {
    let n = vectors.len();
    let dim = vectors[0].1.len();
    let keep = n - 2 * f;
    (0..dim)
        .map(|j| {
            let col: Vec<(f32, u64)> = vectors.iter().map(|(id, v)| (v[j], *id)).collect();
            trim_coordinate(&col, keep)
        })
        .collect()
}

/// Bulyan: iterated Krum picks n - 2f candidates (neighbour count clamped to
/// at least 1 as the pool shrinks), then a trimmed mean over the candidate
/// set keeps (n - 2f) - 2f values per coordinate.
pub fn oracle_bulyan(vectors: &[(u64, Vec<f32>)], f: usize) -> Vec<f64> {
    let n = vectors.len();
    let theta = n - 2 * f;
    let mut pool = vectors.to_vec();
    let mut selected = Vec::with_capacity(theta);
    for _ in 0..theta {
        let idx = if pool.len() == 1 {
            0
        } else {
            let m = pool.len();
            let neighbours = m.saturating_sub(f + 2).max(1).min(m - 1);
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for i in 0..m {
                let mut dists: Vec<f64> = Vec::new();
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    dists.push(
                        pool[i]
                            .1
                            .iter()
                            .zip(&pool[j].1)
                            .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                            .sum(),
                    );
                }
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let score: f64 = dists[..neighbours].iter().sum();
                if score < best_score || (score == best_score && pool[i].0 < pool[best].0) {
                    best_score = score;
                    best = i;
                }
            }
            best
        };
        selected.push(pool.remove(idx));
    }
    let keep = theta - 2 * f;
    let dim = selected[0].1.len();
    (0..dim)
        .map(|j| {
            let col: Vec<(f32, u64)> = selected.iter().map(|(id, v)| (v[j], *id)).collect();
            trim_coordinate(&col, keep)
        })
        .collect()
}

// ----------------------------------------------------------------- fixtures

/// Locate the MNIST IDX directory: FATSIM_DATA_DIR, else the repo's
/// data/mnist.
pub fn mnist_dir() -> PathBuf {
    if let Ok(d) = std::env::var("FATSIM_DATA_DIR") {
        if !d.is_empty() {
            return PathBuf::from(d);
        }
    }
    let repo = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    if repo.join("train-images-idx3-ubyte").exists() {
        return repo;
    }
    panic!(
        "MNIST IDX files not found; run scripts/fetch_mnist.sh or set FATSIM_DATA_DIR \
         to a directory with the four standard files"
    );
}

/// Load a bundled scenario config and pin its dataset dir to an absolute
/// path so the test is independent of the working directory.
pub fn load_scenario(name: &str) -> fatsim_core::orchestrator::ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).expect("config parses");
    if value["dataset"]["source"] == "idx_dir" {
        value["dataset"]["dir"] =
            serde_json::Value::String(mnist_dir().display().to_string());
    }
    let cfg = fatsim_core::orchestrator::ExperimentConfig::from_value(value).expect("valid config");
    cfg.validate().expect("config validates");
    cfg
}
