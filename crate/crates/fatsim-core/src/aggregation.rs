//! Server-side aggregation rules over client update vectors: FedAvg and the
//! Byzantine-robust rules Krum, coordinate-wise Trimmed Mean, and Bulyan.
//!
//! Updates are full weight vectors, not gradients or deltas. Distances and
//! means accumulate in f64. Tie-breaks are always deterministic: by absolute
//! distance, then smaller value, then lower client id.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update length mismatch: client {client_id} has {got}, expected {expected}")]
    LengthMismatch { client_id: u64, got: usize, expected: usize },
    #[error("client {client_id} submitted a non-finite value")]
    NonFinite { client_id: u64 },
    #[error("{rule} needs at least {needed} updates for f={f}, got {got}")]
    TooFewUpdates { rule: &'static str, needed: usize, f: usize, got: usize },
}

/// One client's proposed parameter vector for a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub vector: Vec<f32>,
    /// Training samples backing this update; weights FedAvg.
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    Fedavg,
    Krum,
    TrimmedMean,
    Bulyan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub rule: AggregationRule,
    /// Tolerated Byzantine client count (ignored by FedAvg).
    #[serde(default)]
    pub f: usize,
}

impl AggregationConfig {
    /// Minimum number of updates the rule can aggregate at this f.
    pub fn min_updates(&self) -> usize {
        match self.rule {
            AggregationRule::Fedavg => 1,
            // Krum needs n - f - 2 >= 1 neighbours to score.
            AggregationRule::Krum => self.f + 3,
            // Trimmed mean needs a nonempty kept set of n - 2f values.
            AggregationRule::TrimmedMean => 2 * self.f + 1,
            AggregationRule::Bulyan => 4 * self.f + 3,
        }
    }
}

/// Krum's selection guarantee assumes n >= 2f + 3; below that the rule still
/// computes but the Byzantine-robustness argument no longer holds.
pub fn krum_guarantee_met(n: usize, f: usize) -> bool {
    n >= 2 * f + 3
}

fn validate(updates: &[ClientUpdate]) -> Result<usize, AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    let dim = first.vector.len();
    for u in updates {
        if u.vector.len() != dim {
            return Err(AggregationError::LengthMismatch {
                client_id: u.client_id,
                got: u.vector.len(),
                expected: dim,
            });
        }
        if u.vector.iter().any(|v| !v.is_finite()) {
            return Err(AggregationError::NonFinite { client_id: u.client_id });
        }
    }
    Ok(dim)
}

/// Sample-count-weighted mean per coordinate.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<Vec<f32>, AggregationError> {
    let dim = validate(updates)?;
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let mut out = vec![0.0f64; dim];
    for u in updates {
        let w = if total > 0.0 { u.sample_count as f64 / total } else { 1.0 / updates.len() as f64 };
        for (o, &v) in out.iter_mut().zip(&u.vector) {
            *o += w * v as f64;
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Krum scores: for each update, the sum of squared L2 distances to its
/// n - f - 2 nearest neighbours.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<f64>, AggregationError> {
    validate(updates)?;
    let n = updates.len();
    let needed = f + 3;
    if n < needed {
        return Err(AggregationError::TooFewUpdates { rule: "krum", needed, f, got: n });
    }
    let neighbours = n - f - 2;
    // full pairwise squared distances, f64 accumulation
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = updates[i]
                .vector
                .iter()
                .zip(&updates[j].vector)
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<f64> =
            (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        scores.push(others[..neighbours].iter().sum());
    }
    Ok(scores)
}

/// Select the update with the lowest Krum score; ties go to the lowest
/// client id. Returns (selected index, scores).
pub fn krum(updates: &[ClientUpdate], f: usize) -> Result<(usize, Vec<f64>), AggregationError> {
    let scores = krum_scores(updates, f)?;
    let mut best = 0;
    for i in 1..updates.len() {
        let better = scores[i] < scores[best]
            || (scores[i] == scores[best] && updates[i].client_id < updates[best].client_id);
        if better {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Per-coordinate order of "closeness to the median": absolute distance,
/// then smaller value, then lower client id. The median of an even count is
/// the lower middle value.
fn closest_to_median_order(values: &mut [(f32, u64)]) {
    values.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    });
    let median = values[(values.len() - 1) / 2].0;
    values.sort_by(|a, b| {
        let da = (a.0 - median).abs();
        let db = (b.0 - median).abs();
        da.partial_cmp(&db)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.1.cmp(&b.1))
    });
}

fn trimmed_mean_of(updates: &[ClientUpdate], keep: usize) -> Vec<f32> {
    let dim = updates[0].vector.len();
    let n = updates.len();
    let mut out = vec![0.0f32; dim];
    let mut column: Vec<(f32, u64)> = Vec::with_capacity(n);
    for (j, o) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(updates.iter().map(|u| (u.vector[j], u.client_id)));
        closest_to_median_order(&mut column);
        let sum: f64 = column[..keep].iter().map(|&(v, _)| v as f64).sum();
        *o = (sum / keep as f64) as f32;
    }
    out
}

/// Coordinate-wise trimmed mean: per coordinate, average the n - 2f values
/// closest to the median.
pub fn trimmed_mean(updates: &[ClientUpdate], f: usize) -> Result<Vec<f32>, AggregationError> {
    validate(updates)?;
    let n = updates.len();
    let needed = 2 * f + 1;
    if n < needed {
        return Err(AggregationError::TooFewUpdates { rule: "trimmed_mean", needed, f, got: n });
    }
    Ok(trimmed_mean_of(updates, n - 2 * f))
}

/// Bulyan: iterated Krum selects n - 2f candidates, then a per-coordinate
/// trimmed mean keeps the (n - 2f) - 2f values closest to the median.
pub fn bulyan(updates: &[ClientUpdate], f: usize) -> Result<Vec<f32>, AggregationError> {
    validate(updates)?;
    let n = updates.len();
    let needed = 4 * f + 3;
    if n < needed {
        return Err(AggregationError::TooFewUpdates { rule: "bulyan", needed, f, got: n });
    }
    let theta = n - 2 * f;
    let mut pool: Vec<ClientUpdate> = updates.to_vec();
    let mut selected: Vec<ClientUpdate> = Vec::with_capacity(theta);
    for _ in 0..theta {
        let winner = if pool.len() == 1 {
            0
        } else {
            inner_krum_select(&pool, f)
        };
        selected.push(pool.remove(winner));
    }
    let keep = theta - 2 * f;
    Ok(trimmed_mean_of(&selected, keep))
}

/// Krum selection inside Bulyan's loop: neighbour count n - f - 2 clamped to
/// at least one so the shrinking pool stays scoreable (all-zero scores fall
/// back to the client-id tie-break).
fn inner_krum_select(pool: &[ClientUpdate], f: usize) -> usize {
    let n = pool.len();
    let neighbours = n.saturating_sub(f + 2).max(1).min(n - 1);
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                pool[i]
                    .vector
                    .iter()
                    .zip(&pool[j].vector)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let score: f64 = dists[..neighbours].iter().sum();
        if score < best_score || (score == best_score && pool[i].client_id < pool[best].client_id)
        {
            best_score = score;
            best = i;
        }
    }
    best
}

/// Dispatch an aggregation config over a round's updates. Returns the new
/// global vector plus the selected client id when the rule picks one.
pub fn aggregate(
    cfg: &AggregationConfig,
    updates: &[ClientUpdate],
) -> Result<(Vec<f32>, Option<u64>), AggregationError> {
    match cfg.rule {
        AggregationRule::Fedavg => Ok((fedavg(updates)?, None)),
        AggregationRule::Krum => {
            let (idx, _) = krum(updates, cfg.f)?;
            Ok((updates[idx].vector.clone(), Some(updates[idx].client_id)))
        }
        AggregationRule::TrimmedMean => Ok((trimmed_mean(updates, cfg.f)?, None)),
        AggregationRule::Bulyan => Ok((bulyan(updates, cfg.f)?, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: u64, v: Vec<f32>) -> ClientUpdate {
        ClientUpdate { client_id: id, vector: v, sample_count: 1 }
    }

    fn upd_w(id: u64, v: Vec<f32>, w: usize) -> ClientUpdate {
        ClientUpdate { client_id: id, vector: v, sample_count: w }
    }

    #[test]
    fn fedavg_identity_and_midpoint() {
        let single = vec![upd(0, vec![1.0, -2.0])];
        assert_eq!(fedavg(&single).unwrap(), vec![1.0, -2.0]);
        let pair = vec![upd(0, vec![0.0]), upd(1, vec![2.0])];
        assert_eq!(fedavg(&pair).unwrap(), vec![1.0]);
    }

    #[test]
    fn fedavg_weighted_mean() {
        // weights (1, 3) on [0] and [4] -> (1*0 + 3*4)/4 = 3
        let ups = vec![upd_w(0, vec![0.0], 1), upd_w(1, vec![4.0], 3)];
        assert_eq!(fedavg(&ups).unwrap(), vec![3.0]);
    }

    #[test]
    fn fedavg_rejects_length_mismatch() {
        let ups = vec![upd(0, vec![0.0, 1.0]), upd(1, vec![2.0])];
        assert!(matches!(
            fedavg(&ups),
            Err(AggregationError::LengthMismatch { client_id: 1, .. })
        ));
    }

    #[test]
    fn krum_worked_example() {
        // 1-D updates {0, 1, 2, 10}, f=0 (2 neighbours):
        // scores {5, 2, 5, 145} -> select the update with value 1
        let ups = vec![
            upd(0, vec![0.0]),
            upd(1, vec![1.0]),
            upd(2, vec![2.0]),
            upd(3, vec![10.0]),
        ];
        let (idx, scores) = krum(&ups, 0).unwrap();
        assert_eq!(scores, vec![5.0, 2.0, 5.0, 145.0]);
        assert_eq!(idx, 1);
    }

    #[test]
    fn krum_identical_updates_tie_break_lowest_id() {
        let ups: Vec<ClientUpdate> = (0..5).map(|i| upd(4 - i, vec![3.0, 3.0])).collect();
        let (idx, scores) = krum(&ups, 1).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
        assert_eq!(ups[idx].client_id, 0);
    }

    #[test]
    fn krum_needs_enough_updates() {
        let ups = vec![upd(0, vec![0.0]), upd(1, vec![1.0]), upd(2, vec![2.0])];
        assert!(matches!(
            krum(&ups, 1),
            Err(AggregationError::TooFewUpdates { rule: "krum", .. })
        ));
    }

    #[test]
    fn krum_returns_an_input_vector_verbatim() {
        let ups: Vec<ClientUpdate> = (0..7)
            .map(|i| upd(i, vec![i as f32 * 0.25, 1.0 - i as f32 * 0.125]))
            .collect();
        let cfg = AggregationConfig { rule: AggregationRule::Krum, f: 1 };
        let (vec_out, chosen) = aggregate(&cfg, &ups).unwrap();
        let chosen = chosen.unwrap();
        assert_eq!(vec_out, ups[chosen as usize].vector);
    }

    #[test]
    fn trimmed_mean_worked_example() {
        // [1,2,3,4,100], f=1: median 3, keep {2,3,4}, mean 3
        let ups = vec![
            upd(0, vec![1.0]),
            upd(1, vec![2.0]),
            upd(2, vec![3.0]),
            upd(3, vec![4.0]),
            upd(4, vec![100.0]),
        ];
        assert_eq!(trimmed_mean(&ups, 1).unwrap(), vec![3.0]);
    }

    #[test]
    fn trimmed_mean_constant_and_f0() {
        let ups: Vec<ClientUpdate> = (0..4).map(|i| upd(i, vec![7.5])).collect();
        assert_eq!(trimmed_mean(&ups, 1).unwrap(), vec![7.5]);
        // f=0 keeps everything: plain mean
        let ups = vec![upd(0, vec![1.0]), upd(1, vec![2.0]), upd(2, vec![6.0])];
        assert_eq!(trimmed_mean(&ups, 0).unwrap(), vec![3.0]);
    }

    #[test]
    fn trimmed_mean_outlier_stays_in_benign_range() {
        // with f >= 1 a single huge outlier cannot drag the result outside
        // the benign values
        let ups = vec![
            upd(0, vec![0.9]),
            upd(1, vec![1.0]),
            upd(2, vec![1.1]),
            upd(3, vec![1e30]),
        ];
        let out = trimmed_mean(&ups, 1).unwrap();
        assert!(out[0] >= 0.9 && out[0] <= 1.1, "{out:?}");
    }

    #[test]
    fn trimmed_mean_needs_quorum() {
        let ups = vec![upd(0, vec![0.0]), upd(1, vec![1.0])];
        assert!(matches!(
            trimmed_mean(&ups, 1),
            Err(AggregationError::TooFewUpdates { rule: "trimmed_mean", .. })
        ));
    }

    #[test]
    fn bulyan_f0_collapses_to_mean() {
        let ups = vec![upd(0, vec![1.0, 4.0]), upd(1, vec![2.0, 5.0]), upd(2, vec![3.0, 9.0])];
        let out = bulyan(&ups, 0).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-6);
        assert!((out[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn bulyan_identical_updates() {
        let ups: Vec<ClientUpdate> = (0..7).map(|i| upd(i, vec![1.5, -2.5])).collect();
        assert_eq!(bulyan(&ups, 1).unwrap(), vec![1.5, -2.5]);
    }

    #[test]
    fn bulyan_needs_4f_plus_3() {
        let ups: Vec<ClientUpdate> = (0..6).map(|i| upd(i, vec![0.0])).collect();
        assert!(matches!(
            bulyan(&ups, 1),
            Err(AggregationError::TooFewUpdates { rule: "bulyan", .. })
        ));
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let ups = vec![upd(0, vec![0.0]), upd(1, vec![f32::NAN])];
        assert!(matches!(fedavg(&ups), Err(AggregationError::NonFinite { client_id: 1 })));
    }

    #[test]
    fn permutation_invariance_with_distinct_values() {
        // distinct coordinates: permuting client order must not change output
        let base: Vec<ClientUpdate> = (0..9)
            .map(|i| upd(i, vec![(i as f32).sin(), (i as f32 * 1.7).cos(), i as f32 * 0.3]))
            .collect();
        let mut permuted = base.clone();
        permuted.rotate_left(4);
        permuted.swap(0, 7);
        for f in [0usize, 1] {
            let a = trimmed_mean(&base, f).unwrap();
            let b = trimmed_mean(&permuted, f).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            let a = bulyan(&base, f).unwrap();
            let b = bulyan(&permuted, f).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            let (ia, _) = krum(&base, f).unwrap();
            let (ib, _) = krum(&permuted, f).unwrap();
            assert_eq!(base[ia].client_id, permuted[ib].client_id);
        }
    }

    #[test]
    fn krum_guarantee_predicate() {
        assert!(krum_guarantee_met(11, 4));
        assert!(!krum_guarantee_met(11, 5));
        assert!(krum_guarantee_met(51, 24));
    }
}
