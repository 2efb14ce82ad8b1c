//! Grouping nodes by price-volatility behaviour.
//!
//! Each node becomes a feature row of daily price standard deviations,
//! standardized per day, reduced with PCA to the leading components, then
//! clustered with restarted K-means. The cluster count can be picked
//! automatically from the inertia curve's elbow.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::MarketDataset;
use crate::numeric::{kahan_sum, mean, sample_std};

// ---------------------------------------------------------------------------
// Feature construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// Row order, sorted by node id.
    pub node_ids: Vec<String>,
    /// One row per node, one column per day: standardized daily sigma.
    pub rows: Vec<Vec<f64>>,
    /// Columns whose raw spread across nodes was zero (left as zeros).
    pub degenerate_columns: Vec<usize>,
}

/// Daily price standard deviation per node over the given days, standardized
/// so each day has zero mean and unit spread across nodes.
pub fn daily_sigma_features(dataset: &MarketDataset, days: &[NaiveDate]) -> Result<FeatureMatrix> {
    if days.is_empty() {
        return Err(Error::invalid("no days for features"));
    }
    let node_ids: Vec<String> = dataset.node_ids();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(node_ids.len());
    for id in &node_ids {
        let mut row = Vec::with_capacity(days.len());
        for d in days {
            row.push(sample_std(dataset.day_view(id, *d)?.lmp));
        }
        rows.push(row);
    }

    let cols = days.len();
    let mut degenerate = Vec::new();
    for c in 0..cols {
        let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let m = mean(&col);
        let s = sample_std(&col);
        if s == 0.0 {
            degenerate.push(c);
            for r in rows.iter_mut() {
                r[c] = 0.0;
            }
        } else {
            for r in rows.iter_mut() {
                r[c] = (r[c] - m) / s;
            }
        }
    }
    Ok(FeatureMatrix { node_ids, rows, degenerate_columns: degenerate })
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    /// Column means removed before projection.
    pub means: Vec<f64>,
    /// Retained components, each a unit vector over the original features.
    pub basis: Vec<Vec<f64>>,
    /// All eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
    pub retained: usize,
    /// Fraction of total variance carried by the retained components.
    pub explained: f64,
    /// True when the data had no variance at all.
    pub degenerate: bool,
}

/// Projects rows onto the smallest set of principal components explaining at
/// least `min_explained` of the variance. Returns the scores and the model.
pub fn pca_reduce(rows: &[Vec<f64>], min_explained: f64) -> Result<(Vec<Vec<f64>>, PcaModel)> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::invalid("feature matrix is empty"));
    }
    let n = rows.len();
    let f = rows[0].len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(Error::invalid("ragged feature matrix"));
    }
    if !(0.0 < min_explained && min_explained <= 1.0) {
        return Err(Error::invalid("explained-variance target must be in (0, 1]"));
    }

    let means: Vec<f64> = (0..f).map(|c| mean(&rows.iter().map(|r| r[c]).collect::<Vec<_>>())).collect();
    let centered = DMatrix::<f64>::from_fn(n, f, |r, c| rows[r][c] - means[c]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total = kahan_sum(eigenvalues.iter().copied());

    let (retained, explained, degenerate) = if total <= 0.0 || n < 2 {
        (1, 1.0, true)
    } else {
        let mut cum = 0.0;
        let mut keep = f;
        for (i, ev) in eigenvalues.iter().enumerate() {
            cum += ev;
            if cum / total >= min_explained {
                keep = i + 1;
                break;
            }
        }
        (keep, eigenvalues[..keep].iter().sum::<f64>() / total, false)
    };

    let basis: Vec<Vec<f64>> = order[..retained]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();

    let scores: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            basis
                .iter()
                .map(|b| kahan_sum((0..f).map(|c| (rows[r][c] - means[c]) * b[c])))
                .collect()
        })
        .collect();

    Ok((
        scores,
        PcaModel { means, basis, eigenvalues, retained, explained, degenerate },
    ))
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment pass of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(x[rng.random_range(0..n)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = x.iter().map(|p| nearest(p, &centroids).1).collect();
        let total = kahan_sum(d2.iter().copied());
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(x[idx].clone());
    }
    centroids
}

const KMEANS_MAX_ITERS: usize = 300;

fn lloyd(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KmeansModel {
    let n = x.len();
    let dim = x[0].len();
    let mut centroids = kmeans_pp_init(x, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let mut changed = false;
        let mut inertia = crate::numeric::KahanSum::new();
        for (i, p) in x.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            inertia.add(d);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        trace.push(inertia.value());
        if !changed || iterations >= KMEANS_MAX_ITERS {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in x.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Give an empty cluster the point farthest from its current
                // assignment so the next pass cannot leave it empty again.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&x[a], &centroids[labels[a]])
                            .partial_cmp(&sq_dist(&x[b], &centroids[labels[b]]))
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c] = x[far].clone();
            }
        }
    }

    let inertia = *trace.last().unwrap();
    KmeansModel { k, centroids, labels, inertia, iterations, inertia_trace: trace }
}

/// Restarted K-means with k-means++ seeding. Restart `r` derives its stream
/// from `seed + r`; the lowest-inertia restart wins, first on ties.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KmeansModel> {
    if x.is_empty() {
        return Err(Error::invalid("no points to cluster"));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points must share a nonzero dimension"));
    }
    if k == 0 || k > x.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", x.len())));
    }
    if restarts == 0 {
        return Err(Error::invalid("need at least one restart"));
    }

    let mut best: Option<KmeansModel> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let model = lloyd(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

// ---------------------------------------------------------------------------
// Elbow selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElbowResult {
    pub chosen_k: usize,
    /// (k, inertia) over the evaluated range.
    pub inertias: Vec<(usize, f64)>,
}

/// Picks k in `k_min..=k_max` where the inertia curve bends hardest: the
/// largest second difference `inertia[k-1] - 2 inertia[k] + inertia[k+1]`,
/// evaluating one k on each side of the requested range where possible.
/// Ties and flat curves resolve to the smallest k.
pub fn elbow_select(x: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<ElbowResult> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::invalid("need 1 <= k_min <= k_max"));
    }
    if x.is_empty() {
        return Err(Error::invalid("no points to cluster"));
    }
    let n = x.len();
    let lo = k_min.saturating_sub(1).max(1);
    let hi = (k_max + 1).min(n);
    let mut inertias: BTreeMap<usize, f64> = BTreeMap::new();
    for k in lo..=hi {
        inertias.insert(k, kmeans(x, k, seed, restarts)?.inertia);
    }

    let mut chosen = k_min.min(n);
    let mut best_curv = f64::NEG_INFINITY;
    for k in k_min..=k_max.min(n) {
        let (Some(prev), Some(cur), Some(next)) =
            (inertias.get(&(k - 1)), inertias.get(&k), inertias.get(&(k + 1)))
        else {
            continue;
        };
        let curv = prev - 2.0 * cur + next;
        if curv > best_curv {
            best_curv = curv;
            chosen = k;
        }
    }
    Ok(ElbowResult { chosen_k: chosen, inertias: inertias.into_iter().collect() })
}
