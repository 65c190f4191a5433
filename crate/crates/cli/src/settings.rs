//! Fit settings merged from flags, an optional JSON file, and defaults.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use ziptf::consensus::ConsensusConfig;
use ziptf::registry::FitConfig;
use ziptf::svi::EstimatorKind;

use crate::Failure;

/// Keys accepted in `--config` files. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub max_iter: Option<usize>,
    pub learning_rate: Option<f64>,
    pub final_learning_rate: Option<f64>,
    pub samples: Option<usize>,
    pub estimator: Option<String>,
    pub init_shape: Option<f64>,
    pub baseline_decay: Option<f64>,
    pub prior_shape: Option<f64>,
    pub prior_rate: Option<f64>,
    pub zeta_mean: Option<f64>,
    pub zeta_sd: Option<f64>,
    pub tol: Option<f64>,
    pub tg_sigma: Option<f64>,
    pub restarts: Option<usize>,
    pub mode: Option<usize>,
    pub n_neighbors: Option<usize>,
    pub lof_threshold: Option<f64>,
    pub kmeans_restarts: Option<usize>,
    pub freeze: Option<bool>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Engine flags shared by `factorize`, `consensus` and `rank-scan`.
#[derive(Debug, Clone, Args)]
pub struct FitFlags {
    /// ziptf, gptf, tgtf, bptf or nncp-als.
    #[arg(long, default_value = "ziptf")]
    pub method: String,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub final_learning_rate: Option<f64>,
    /// Monte Carlo samples per gradient step.
    #[arg(long)]
    pub samples: Option<usize>,
    /// reparameterized or score-function.
    #[arg(long)]
    pub estimator: Option<String>,
    /// Starting shape of the variational Gamma factors.
    #[arg(long)]
    pub init_shape: Option<f64>,
    /// Relative ELBO tolerance for bptf, residual tolerance for nncp-als.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub tg_sigma: Option<f64>,
}

/// Consensus flags shared by `consensus` and `rank-scan`.
#[derive(Debug, Clone, Args)]
pub struct ConsensusFlags {
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Mode to pool restarts on; defaults to the last one.
    #[arg(long)]
    pub mode: Option<usize>,
    #[arg(long)]
    pub n_neighbors: Option<usize>,
    #[arg(long)]
    pub lof_threshold: Option<f64>,
    /// Hold the consensus fixed in the refit.
    #[arg(long)]
    pub freeze: bool,
}

/// The merged settings, recorded verbatim in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub method: String,
    pub seed: u64,
    pub max_iter: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub samples: usize,
    pub estimator: String,
    pub init_shape: f64,
    pub baseline_decay: f64,
    pub prior_shape: f64,
    pub prior_rate: f64,
    pub zeta_mean: f64,
    pub zeta_sd: f64,
    pub cavi_tol: f64,
    pub als_tol: f64,
    pub tg_sigma: f64,
    pub restarts: usize,
    pub mode: Option<usize>,
    pub n_neighbors: usize,
    pub lof_threshold: f64,
    pub kmeans_restarts: usize,
    pub freeze: bool,
    pub workers: usize,
}

impl Settings {
    pub fn resolve(fit: &FitFlags, cons: Option<&ConsensusFlags>, file: &ConfigFile, seed: u64, workers: usize) -> Result<Self, Failure> {
        let d = FitConfig::default();
        let c = ConsensusConfig::default();
        let estimator = fit
            .estimator
            .clone()
            .or_else(|| file.estimator.clone())
            .unwrap_or_else(|| d.svi.estimator.name().to_string());
        let estimator = EstimatorKind::parse(&estimator)
            .ok_or_else(|| Failure::Usage(format!("unknown estimator `{estimator}`")))?
            .name()
            .to_string();
        let tol = fit.tol.or(file.tol);
        Ok(Settings {
            method: fit.method.clone(),
            seed,
            max_iter: fit.max_iter.or(file.max_iter).unwrap_or(d.svi.max_steps),
            learning_rate: fit.learning_rate.or(file.learning_rate).unwrap_or(d.svi.learning_rate),
            final_learning_rate: fit.final_learning_rate.or(file.final_learning_rate).unwrap_or(d.svi.final_learning_rate),
            samples: fit.samples.or(file.samples).unwrap_or(d.svi.n_samples),
            estimator,
            init_shape: fit.init_shape.or(file.init_shape).unwrap_or(d.svi.init_shape),
            baseline_decay: file.baseline_decay.unwrap_or(d.svi.baseline_decay),
            prior_shape: file.prior_shape.unwrap_or(d.svi.prior.alpha),
            prior_rate: file.prior_rate.unwrap_or(d.svi.prior.rate),
            zeta_mean: file.zeta_mean.unwrap_or(d.svi.prior.zeta_mean),
            zeta_sd: file.zeta_sd.unwrap_or(d.svi.prior.zeta_sd),
            cavi_tol: tol.unwrap_or(d.cavi.tol),
            als_tol: tol.unwrap_or(d.als.tol),
            tg_sigma: fit.tg_sigma.or(file.tg_sigma).unwrap_or(d.tg_sigma),
            restarts: cons.and_then(|f| f.restarts).or(file.restarts).unwrap_or(c.runs),
            mode: cons.and_then(|f| f.mode).or(file.mode),
            n_neighbors: cons.and_then(|f| f.n_neighbors).or(file.n_neighbors).unwrap_or(c.n_neighbors),
            lof_threshold: cons.and_then(|f| f.lof_threshold).or(file.lof_threshold).unwrap_or(c.lof_threshold),
            kmeans_restarts: file.kmeans_restarts.unwrap_or(c.kmeans_restarts),
            freeze: cons.is_some_and(|f| f.freeze) || file.freeze.unwrap_or(c.freeze),
            workers,
        })
    }

    pub fn fit_config(&self) -> FitConfig {
        let mut cfg = FitConfig::default().with_seed(self.seed);
        cfg.svi.max_steps = self.max_iter;
        cfg.svi.learning_rate = self.learning_rate;
        cfg.svi.final_learning_rate = self.final_learning_rate;
        cfg.svi.n_samples = self.samples;
        cfg.svi.estimator = EstimatorKind::parse(&self.estimator).expect("validated on resolve");
        cfg.svi.init_shape = self.init_shape;
        cfg.svi.baseline_decay = self.baseline_decay;
        cfg.svi.prior.alpha = self.prior_shape;
        cfg.svi.prior.rate = self.prior_rate;
        cfg.svi.prior.zeta_mean = self.zeta_mean;
        cfg.svi.prior.zeta_sd = self.zeta_sd;
        cfg.cavi.max_iter = self.max_iter;
        cfg.cavi.alpha = self.prior_shape;
        cfg.cavi.tol = self.cavi_tol;
        cfg.als.max_iter = self.max_iter;
        cfg.als.tol = self.als_tol;
        cfg.tg_sigma = self.tg_sigma;
        cfg
    }

    pub fn consensus_config(&self) -> ConsensusConfig {
        ConsensusConfig {
            runs: self.restarts,
            base_seed: self.seed,
            mode: self.mode,
            n_neighbors: self.n_neighbors,
            lof_threshold: self.lof_threshold,
            kmeans_restarts: self.kmeans_restarts,
            freeze: self.freeze,
            workers: self.workers,
            identical_seeds: false,
        }
    }
}
