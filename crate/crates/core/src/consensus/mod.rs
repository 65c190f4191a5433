//! Consensus meta-analysis over randomly restarted factorizations.
//!
//! Restarts are pooled on one mode, clustered into `rank` groups with
//! outliers removed, summarized by per-cluster medians, and the medians seed
//! one last fit.

mod cluster;

use std::fs;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

pub use cluster::{column_distances, kmeans_columns, lof_filter, lof_scores, silhouette_score, KMeans};

use crate::error::{Error, Result};
use crate::init::InitGuess;
use crate::io::{write_factor_csv, write_model_dir};
use crate::metrics::explained_variance;
use crate::prob::derive_seed;
use crate::registry::{Factorizer, FitConfig, FitOutcome};
use crate::tensor::{FactorModel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusConfig {
    pub runs: usize,
    pub base_seed: u64,
    /// Mode to pool on; `None` means the last mode.
    pub mode: Option<usize>,
    pub n_neighbors: usize,
    pub lof_threshold: f64,
    pub kmeans_restarts: usize,
    /// Keep the consensus fixed in the refit instead of only starting there.
    pub freeze: bool,
    /// Worker threads for the restarts; 0 uses all cores.
    pub workers: usize,
    /// Give every restart the same seed. Only useful for testing.
    pub identical_seeds: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            runs: 10,
            base_seed: 0,
            mode: None,
            n_neighbors: 20,
            lof_threshold: 1.5,
            kmeans_restarts: 10,
            freeze: false,
            workers: 0,
            identical_seeds: false,
        }
    }
}

impl ConsensusConfig {
    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.base_seed, if self.identical_seeds { 0 } else { run as u64 })
    }

    fn refit_seed(&self) -> u64 {
        derive_seed(self.base_seed, self.runs as u64)
    }
}

/// `runs` independent fits, returned in run order whatever the scheduling.
pub fn run_restarts(
    t: &Tensor,
    rank: usize,
    method: &dyn Factorizer,
    fit: &FitConfig,
    cfg: &ConsensusConfig,
) -> Result<Vec<FitOutcome>> {
    if cfg.runs < 2 {
        return Err(Error::invalid(format!("need at least two restarts, got {}", cfg.runs)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<FitOutcome>> = pool.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|i| method.fit(t, rank, &fit.with_seed(cfg.run_seed(i)), None))
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(run, r)| r.map_err(|e| Error::RestartFailed { run, source: Box::new(e) }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFactors {
    pub mode: usize,
    /// `I_k × (R·M)`; each run's block has unit Frobenius norm.
    pub columns: Array2<f64>,
    pub run_of_column: Vec<usize>,
}

/// Concatenates every run's mode-`k` matrix, each divided by its own
/// Frobenius norm.
pub fn aggregate(models: &[FactorModel], mode: usize) -> Result<AggregatedFactors> {
    let first = models.first().ok_or_else(|| Error::invalid("no models to aggregate"))?;
    if mode >= first.order() {
        return Err(Error::invalid(format!("mode {mode} out of range for order {}", first.order())));
    }
    let (rows, rank) = first.factor(mode).dim();
    let mut columns = Array2::zeros((rows, rank * models.len()));
    let mut run_of_column = Vec::with_capacity(rank * models.len());
    for (run, m) in models.iter().enumerate() {
        if m.shape() != first.shape() || m.rank() != rank {
            return Err(Error::invalid(format!("run {run} has a different shape or rank")));
        }
        let f = m.factor(mode);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateRun { run, mode });
        }
        for c in 0..rank {
            columns.column_mut(run * rank + c).assign(&f.column(c).mapv(|v| v / norm));
            run_of_column.push(run);
        }
    }
    Ok(AggregatedFactors {
        mode,
        columns,
        run_of_column,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Cluster ids ordered by descending surviving size, ties to the cluster
/// holding the lowest surviving column index.
fn cluster_order(labels: &[usize], surviving: &[bool], k: usize) -> Vec<usize> {
    let mut size = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (j, (&l, &s)) in labels.iter().zip(surviving).enumerate() {
        if s {
            size[l] += 1;
            first[l] = first[l].min(j);
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| size[b].cmp(&size[a]).then(first[a].cmp(&first[b])));
    order
}

/// Entrywise medians of the surviving columns of each cluster, in the
/// canonical cluster order. Returns the matrix and the relabelling map
/// (`new_id[old_label]`).
pub fn consensus_factors(agg: &AggregatedFactors, labels: &[usize], surviving: &[bool], k: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    if labels.len() != agg.columns.ncols() || surviving.len() != labels.len() {
        return Err(Error::invalid("labels and survivor mask must cover every aggregated column"));
    }
    let order = cluster_order(labels, surviving, k);
    let mut new_id = vec![0; k];
    for (pos, &c) in order.iter().enumerate() {
        new_id[c] = pos;
    }
    let rows = agg.columns.nrows();
    let mut out = Array2::zeros((rows, k));
    for (pos, &c) in order.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&j| surviving[j] && labels[j] == c).collect();
        if members.is_empty() {
            return Err(Error::ConsensusDegeneracy {
                reason: format!("cluster {c} is empty after outlier removal"),
                silhouette: f64::NAN,
            });
        }
        let mut buf = vec![0.0; members.len()];
        for i in 0..rows {
            for (b, &j) in buf.iter_mut().zip(&members) {
                *b = agg.columns[[i, j]];
            }
            out[[i, pos]] = median(&mut buf);
        }
    }
    Ok((out, new_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub rank: usize,
    pub method: String,
    pub runs: Vec<FitOutcome>,
    pub run_seeds: Vec<u64>,
    pub aggregated: AggregatedFactors,
    /// Canonical cluster id of every aggregated column, outliers included.
    pub labels: Vec<usize>,
    pub removed_outliers: Vec<usize>,
    pub silhouette: f64,
    pub consensus_matrix: Array2<f64>,
    pub final_fit: FitOutcome,
    pub final_seed: u64,
}

impl ConsensusResult {
    pub fn final_model(&self) -> &FactorModel {
        &self.final_fit.model
    }
}

/// Consensus steps shared by the full pipeline and its tests: pool, cluster,
/// filter, score and summarize already-fitted runs.
pub fn summarize_runs(
    models: &[FactorModel],
    rank: usize,
    mode: usize,
    cfg: &ConsensusConfig,
) -> Result<(AggregatedFactors, Vec<usize>, Vec<usize>, f64, Array2<f64>)> {
    let agg = aggregate(models, mode)?;
    let km = kmeans_columns(&agg.columns, rank, cfg.kmeans_restarts, derive_seed(cfg.base_seed, u64::MAX))?;
    let pop = agg.columns.ncols();
    let keep = lof_filter(&agg.columns, cfg.n_neighbors.min(pop.saturating_sub(1)), cfg.lof_threshold)?;
    let removed: Vec<usize> = (0..pop).filter(|&j| !keep[j]).collect();
    let kept: Vec<usize> = (0..pop).filter(|&j| keep[j]).collect();
    let kept_points = agg.columns.select(ndarray::Axis(1), &kept);
    let kept_labels: Vec<usize> = kept.iter().map(|&j| km.labels[j]).collect();
    let silhouette = silhouette_score(&kept_points, &kept_labels)?;
    let (matrix, new_id) = consensus_factors(&agg, &km.labels, &keep, rank).map_err(|e| match e {
        Error::ConsensusDegeneracy { reason, .. } => Error::ConsensusDegeneracy { reason, silhouette },
        other => other,
    })?;
    let labels = km.labels.iter().map(|&l| new_id[l]).collect();
    Ok((agg, labels, removed, silhouette, matrix))
}

/// Restarts, consensus on one mode, and a refit started from the consensus.
pub fn consensus_fit(
    t: &Tensor,
    rank: usize,
    method: &dyn Factorizer,
    fit: &FitConfig,
    cfg: &ConsensusConfig,
) -> Result<ConsensusResult> {
    if rank < 2 {
        return Err(Error::invalid("consensus needs rank at least 2"));
    }
    let mode = cfg.mode.unwrap_or(t.order() - 1);
    if mode >= t.order() {
        return Err(Error::invalid(format!("mode {mode} out of range for order {}", t.order())));
    }
    let runs = run_restarts(t, rank, method, fit, cfg)?;
    let models: Vec<FactorModel> = runs.iter().map(|r| r.model.clone()).collect();
    let (aggregated, labels, removed_outliers, silhouette, consensus_matrix) = summarize_runs(&models, rank, mode, cfg)?;
    info!(
        "{} rank {rank}: silhouette {silhouette:.4}, {} outlier columns removed",
        method.name(),
        removed_outliers.len()
    );
    let guess = InitGuess {
        mode,
        matrix: consensus_matrix.clone(),
        freeze: cfg.freeze,
    };
    let final_seed = cfg.refit_seed();
    let final_fit = method.fit(t, rank, &fit.with_seed(final_seed), Some(&guess))?;
    Ok(ConsensusResult {
        rank,
        method: method.name().to_string(),
        run_seeds: (0..cfg.runs).map(|i| cfg.run_seed(i)).collect(),
        runs,
        aggregated,
        labels,
        removed_outliers,
        silhouette,
        consensus_matrix,
        final_fit,
        final_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankScanRow {
    pub rank: usize,
    pub explained_variance: f64,
    pub silhouette: f64,
    pub removed_outliers: usize,
}

/// One consensus fit per rank. No rank is picked; the table is for the user.
pub fn rank_scan(
    t: &Tensor,
    ranks: &[usize],
    method: &dyn Factorizer,
    fit: &FitConfig,
    cfg: &ConsensusConfig,
) -> Result<Vec<(RankScanRow, ConsensusResult)>> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to scan"));
    }
    if let Some(r) = ranks.iter().find(|&&r| r < 2) {
        return Err(Error::invalid(format!("scan ranks must be at least 2, got {r}")));
    }
    ranks
        .iter()
        .map(|&rank| {
            let res = consensus_fit(t, rank, method, fit, cfg)?;
            let row = RankScanRow {
                rank,
                explained_variance: explained_variance(t, res.final_model())?,
                silhouette: res.silhouette,
                removed_outliers: res.removed_outliers.len(),
            };
            Ok((row, res))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ConsensusMetrics<'a> {
    method: &'a str,
    rank: usize,
    mode: usize,
    silhouette: f64,
    explained_variance: f64,
    run_explained_variance: Vec<f64>,
    removed_outliers: usize,
    run_seeds: &'a [u64],
    final_seed: u64,
    zero_inflation: Option<f64>,
}

/// Persists a result under `dir`: `runs/run_<i>/`, `aggregated.csv`,
/// `labels.csv`, `consensus.csv`, `final/` and `metrics.json`.
pub fn write_consensus(dir: &Path, t: &Tensor, res: &ConsensusResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in res.runs.iter().enumerate() {
        write_model_dir(&dir.join("runs").join(format!("run_{i}")), &r.model)?;
    }
    write_factor_csv(&dir.join("aggregated.csv"), &res.aggregated.columns)?;
    let mut labels = String::from("column,run,cluster,outlier\n");
    for (j, &l) in res.labels.iter().enumerate() {
        let outlier = res.removed_outliers.binary_search(&j).is_ok();
        labels.push_str(&format!("{j},{},{l},{outlier}\n", res.aggregated.run_of_column[j]));
    }
    let p = dir.join("labels.csv");
    fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    write_factor_csv(&dir.join("consensus.csv"), &res.consensus_matrix)?;
    write_model_dir(&dir.join("final"), res.final_model())?;
    let run_ev = res
        .runs
        .iter()
        .map(|r| explained_variance(t, &r.model))
        .collect::<Result<Vec<f64>>>()?;
    let metrics = ConsensusMetrics {
        method: &res.method,
        rank: res.rank,
        mode: res.aggregated.mode,
        silhouette: res.silhouette,
        explained_variance: explained_variance(t, res.final_model())?,
        run_explained_variance: run_ev,
        removed_outliers: res.removed_outliers.len(),
        run_seeds: &res.run_seeds,
        final_seed: res.final_seed,
        zero_inflation: res.final_fit.zero_inflation,
    };
    let p = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}
