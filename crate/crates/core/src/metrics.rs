//! Reconstruction quality and factor-similarity scores.

use log::warn;
use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm, reconstruct, FactorModel, Tensor};

/// `1 - ‖X - X̃‖_F / ‖X‖_F`.
pub fn explained_variance(t: &Tensor, m: &FactorModel) -> Result<f64> {
    if m.shape() != t.shape() {
        return Err(Error::invalid(format!(
            "model shape {:?} does not match tensor shape {:?}",
            m.shape(),
            t.shape()
        )));
    }
    let recon = reconstruct(m.factors(), t.shape());
    explained_variance_of(t, &recon)
}

/// Explained variance of an already reconstructed tensor (flat, row-major).
pub fn explained_variance_of(t: &Tensor, recon: &[f64]) -> Result<f64> {
    let norm = frobenius_norm(t);
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("explained variance of an all-zero tensor".into()));
    }
    if recon.len() != t.len() {
        return Err(Error::invalid("reconstruction length does not match tensor"));
    }
    let resid: f64 = t.data().iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - resid.sqrt() / norm)
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let (aa, bb) = (a.dot(&a), b.dot(&b));
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    // one square root keeps cos(a, a) at exactly 1
    Some((a.dot(&b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// `C[i, j] = Π_k cos(a_k[:, i], b_k[:, j])`; zero-norm columns count as 0.
fn cosine_products(a: &FactorModel, b: &FactorModel) -> Result<Array2<f64>> {
    if a.rank() != b.rank() || a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "cannot compare models of shapes {:?}/{:?} and ranks {}/{}",
            a.shape(),
            b.shape(),
            a.rank(),
            b.rank()
        )));
    }
    let r = a.rank();
    let mut out = Array2::from_elem((r, r), 1.0);
    let mut zero_col = false;
    for (fa, fb) in a.factors().iter().zip(b.factors()) {
        for i in 0..r {
            for j in 0..r {
                match cosine(fa.column(i), fb.column(j)) {
                    Some(c) => out[[i, j]] *= c,
                    None => {
                        zero_col = true;
                        out[[i, j]] = 0.0;
                    }
                }
            }
        }
    }
    if zero_col {
        warn!("zero-norm factor column in cosine score; its cosines count as 0");
    }
    Ok(out)
}

/// `(1/R) Σ_i max_j Π_k cos(a_k[:, i], b_k[:, j])`. The maximum is taken
/// independently for each `i`, so several columns of `a` may pick the same
/// column of `b` and the score is not symmetric in its arguments.
pub fn cosine_score(a: &FactorModel, b: &FactorModel) -> Result<f64> {
    let c = cosine_products(a, b)?;
    let r = c.nrows();
    let total: f64 = c
        .rows()
        .into_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / r as f64)
}

/// Like [`cosine_score`] but with a one-to-one column matching.
pub fn cosine_score_matched(a: &FactorModel, b: &FactorModel) -> Result<f64> {
    let c = cosine_products(a, b)?;
    let assign = max_assignment(&c);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
    Ok(total / c.nrows() as f64)
}

/// Maximum-weight assignment of rows to distinct columns (`nrows <= ncols`),
/// by the Hungarian algorithm with potentials. Returns the column for each row.
pub fn max_assignment(w: &Array2<f64>) -> Vec<usize> {
    let (n, m) = w.dim();
    assert!(n <= m, "assignment needs at least as many columns as rows");
    // minimize cost = -w; 1-based arrays with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = -w[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Pearson correlation of every column of `a` with every column of `b`;
/// zero-variance columns get correlation 0.
pub fn pearson_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::invalid(format!("row counts differ: {} vs {}", a.nrows(), b.nrows())));
    }
    if a.nrows() < 2 {
        return Err(Error::invalid("correlation needs at least two rows"));
    }
    let center = |m: &Array2<f64>| -> (Array2<f64>, Vec<f64>) {
        let mut c = m.clone();
        let mut norms = Vec::with_capacity(m.ncols());
        for mut col in c.columns_mut() {
            let mean = col.mean().unwrap_or(0.0);
            col.mapv_inplace(|v| v - mean);
            norms.push(col.dot(&col).sqrt());
        }
        (c, norms)
    };
    let (ca, na) = center(a);
    let (cb, nb) = center(b);
    if na.iter().chain(&nb).any(|&n| n == 0.0) {
        warn!("zero-variance column in correlation; its correlations are set to 0");
    }
    let mut out = Array2::zeros((a.ncols(), b.ncols()));
    for i in 0..a.ncols() {
        for j in 0..b.ncols() {
            if na[i] > 0.0 && nb[j] > 0.0 {
                out[[i, j]] = ca.column(i).dot(&cb.column(j)) / (na[i] * nb[j]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// `(factor column, reference column)` pairs.
    pub matching: Vec<(usize, usize)>,
    pub per_pair: Vec<f64>,
    pub average: f64,
}

/// One-to-one alignment of factor columns to reference columns maximizing
/// the total Pearson correlation.
pub fn align_pearson(factors: &Array2<f64>, reference: &Array2<f64>) -> Result<AlignmentReport> {
    let corr = pearson_matrix(factors, reference)?;
    let (r, p) = corr.dim();
    if r == 0 || p == 0 {
        return Err(Error::invalid("need at least one factor and one reference column"));
    }
    let matching: Vec<(usize, usize)> = if r <= p {
        max_assignment(&corr).into_iter().enumerate().collect()
    } else {
        let t = corr.t().to_owned();
        let mut pairs: Vec<(usize, usize)> = max_assignment(&t).into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        pairs
    };
    let per_pair: Vec<f64> = matching.iter().map(|&(i, j)| corr[[i, j]]).collect();
    let average = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(AlignmentReport {
        matching,
        per_pair,
        average,
    })
}

/// One metric observation as emitted in JSON outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub rank: usize,
    pub seed: u64,
    pub method: String,
}
