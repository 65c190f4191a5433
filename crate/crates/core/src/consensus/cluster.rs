//! Column clustering pieces: K-means, local outlier factor, silhouette.

use std::collections::HashMap;

use log::warn;
use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::prob::{derive_seed, stream, Stream};

const LOF_DISTANCE_FLOOR: f64 = 1e-12;
const MAX_LLOYD_ITER: usize = 300;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise Euclidean distances between the columns of `points`.
pub fn column_distances(points: &Array2<f64>) -> Array2<f64> {
    let n = points.ncols();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(points.column(i), points.column(j)).sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
}

fn distinct_columns(points: &Array2<f64>) -> usize {
    let mut seen: Vec<usize> = Vec::new();
    for j in 0..points.ncols() {
        if !seen.iter().any(|&s| points.column(s) == points.column(j)) {
            seen.push(j);
        }
    }
    seen.len()
}

fn plus_plus(points: &Array2<f64>, k: usize, rng: &mut Stream) -> Array2<f64> {
    let n = points.ncols();
    let mut centers = Array2::zeros((points.nrows(), k));
    let first = rng.gen_range(0..n);
    centers.column_mut(0).assign(&points.column(first));
    let mut best: Vec<f64> = (0..n).map(|j| sq_dist(points.column(j), centers.column(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (j, &w) in best.iter().enumerate() {
                if u < w {
                    chosen = j;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.column_mut(c).assign(&points.column(pick));
        for (j, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points.column(j), centers.column(c)));
        }
    }
    centers
}

fn lloyd(points: &Array2<f64>, mut centers: Array2<f64>) -> KMeans {
    let (dim, n, k) = (points.nrows(), points.ncols(), centers.ncols());
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..MAX_LLOYD_ITER {
        let mut changed = false;
        for j in 0..n {
            let (mut arg, mut val) = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(points.column(j), centers.column(c));
                if d < val {
                    arg = c;
                    val = d;
                }
            }
            dist[j] = val;
            if labels[j] != arg {
                labels[j] = arg;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((dim, k));
        let mut counts = vec![0usize; k];
        for j in 0..n {
            let mut col = sums.column_mut(labels[j]);
            col += &points.column(j);
            counts[labels[j]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.column_mut(c).assign(&(&sums.column(c) / counts[c] as f64));
            } else {
                // re-seed an empty cluster at the worst-served point
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap_or(0);
                centers.column_mut(c).assign(&points.column(far));
                dist[far] = 0.0;
            }
        }
    }
    let inertia = (0..n).map(|j| sq_dist(points.column(j), centers.column(labels[j]))).sum();
    KMeans {
        labels,
        centers,
        inertia,
    }
}

/// K-means on the columns of `points` with K-means++ seeding; keeps the
/// lowest-inertia solution over `restarts` seedings.
pub fn kmeans_columns(points: &Array2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("need at least one cluster"));
    }
    let distinct = distinct_columns(points);
    if distinct < k {
        return Err(Error::DegenerateClustering(format!("{distinct} distinct columns for {k} clusters")));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = stream(derive_seed(seed, r as u64));
        let fit = lloyd(points, plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Local outlier factor of every column against its `k` nearest neighbours.
pub fn lof_scores(points: &Array2<f64>, k: usize) -> Result<Vec<f64>> {
    let n = points.ncols();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 0 < neighbours < population, got {k} of {n}")));
    }
    let d = column_distances(points);
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect();
    let k_dist: Vec<f64> = (0..n).map(|i| d[[i, neighbours[i][k - 1]]]).collect();
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let reach: f64 = neighbours[i].iter().map(|&o| k_dist[o].max(d[[i, o]])).sum::<f64>() / k as f64;
            1.0 / reach.max(LOF_DISTANCE_FLOOR)
        })
        .collect();
    Ok((0..n)
        .map(|i| neighbours[i].iter().map(|&o| lrd[o]).sum::<f64>() / (k as f64 * lrd[i]))
        .collect())
}

/// Marks columns to keep: those with LOF at most `threshold`. Populations
/// too small for `n_neighbors` are kept whole.
pub fn lof_filter(points: &Array2<f64>, n_neighbors: usize, threshold: f64) -> Result<Vec<bool>> {
    let n = points.ncols();
    if n <= n_neighbors {
        warn!("{n} columns is too few for {n_neighbors} neighbours; skipping outlier removal");
        return Ok(vec![true; n]);
    }
    Ok(lof_scores(points, n_neighbors)?.into_iter().map(|s| s <= threshold).collect())
}

/// Mean silhouette `(b − a) / max(a, b)` over the columns of `points`.
pub fn silhouette_score(points: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = points.ncols();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} points", labels.len())));
    }
    let mut size: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *size.entry(l).or_default() += 1;
    }
    if size.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let d = column_distances(points);
    let mut total = 0.0;
    for i in 0..n {
        if size[&labels[i]] == 1 {
            continue;
        }
        let mut sums: HashMap<usize, f64> = HashMap::new();
        for j in 0..n {
            if j != i {
                *sums.entry(labels[j]).or_default() += d[[i, j]];
            }
        }
        let a = sums.get(&labels[i]).copied().unwrap_or(0.0) / (size[&labels[i]] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(l, s)| s / size[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}
