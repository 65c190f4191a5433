//! Name-keyed factorization strategies behind one trait, so the consensus
//! pipeline and the CLI can pick a method at runtime.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::als::{fit_nncp_als_from, AlsConfig};
use crate::cavi::{fit_bptf_from, CaviConfig};
use crate::error::{Error, Result};
use crate::init::InitGuess;
use crate::svi::{fit_svi, LikelihoodKind, SviConfig};
use crate::tensor::{FactorModel, Tensor};

/// Settings for every engine; each factorizer reads its own block. `seed`
/// overrides the per-engine seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub seed: u64,
    pub cavi: CaviConfig,
    pub svi: SviConfig,
    pub als: AlsConfig,
    /// Noise scale of the truncated-Gaussian likelihood.
    pub tg_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            seed: 0,
            cavi: CaviConfig::default(),
            svi: SviConfig::default(),
            als: AlsConfig::default(),
            tg_sigma: 1.0,
        }
    }
}

impl FitConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        FitConfig { seed, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: FactorModel,
    /// Final ELBO for the Bayesian engines, negative residual norm for ALS.
    pub objective: f64,
    pub iterations: usize,
    /// Posterior mean excess-zero probability, when the model has one.
    pub zero_inflation: Option<f64>,
    pub trace: Vec<f64>,
}

pub trait Factorizer: Send + Sync {
    fn name(&self) -> &str;
    fn fit(&self, t: &Tensor, rank: usize, cfg: &FitConfig, init: Option<&InitGuess>) -> Result<FitOutcome>;
}

/// ZIPTF, GPTF and TGTF: the SVI engine with a fixed likelihood.
pub struct SviFactorizer {
    name: String,
    kind: fn(&FitConfig) -> LikelihoodKind,
}

impl Factorizer for SviFactorizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&self, t: &Tensor, rank: usize, cfg: &FitConfig, init: Option<&InitGuess>) -> Result<FitOutcome> {
        let svi = SviConfig {
            seed: cfg.seed,
            ..cfg.svi
        };
        let (model, state, report) = fit_svi(t, rank, (self.kind)(cfg), &svi, init)?;
        Ok(FitOutcome {
            model,
            objective: report.smoothed_elbo,
            iterations: report.steps,
            zero_inflation: report.zero_inflation,
            trace: state.elbo_trace().to_vec(),
        })
    }
}

pub struct BptfFactorizer;

impl Factorizer for BptfFactorizer {
    fn name(&self) -> &str {
        "bptf"
    }

    fn fit(&self, t: &Tensor, rank: usize, cfg: &FitConfig, init: Option<&InitGuess>) -> Result<FitOutcome> {
        let cavi = CaviConfig {
            seed: cfg.seed,
            ..cfg.cavi
        };
        let (model, state) = fit_bptf_from(t, rank, &cavi, init)?;
        let trace = state.elbo_trace().to_vec();
        Ok(FitOutcome {
            model,
            objective: trace.last().copied().unwrap_or(f64::NAN),
            iterations: trace.len(),
            zero_inflation: None,
            trace,
        })
    }
}

pub struct AlsFactorizer;

impl Factorizer for AlsFactorizer {
    fn name(&self) -> &str {
        "nncp-als"
    }

    fn fit(&self, t: &Tensor, rank: usize, cfg: &FitConfig, init: Option<&InitGuess>) -> Result<FitOutcome> {
        let als = AlsConfig {
            seed: cfg.seed,
            ..cfg.als
        };
        let out = fit_nncp_als_from(t, rank, &als, init)?;
        Ok(FitOutcome {
            objective: -out.residual_trace.last().copied().unwrap_or(0.0),
            iterations: out.residual_trace.len(),
            zero_inflation: None,
            trace: out.residual_trace,
            model: out.model,
        })
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    entries: IndexMap<String, Arc<dyn Factorizer>>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    /// `ziptf`, `gptf`, `tgtf`, `bptf` and `nncp-als`.
    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        let svi = |name: &str, kind: fn(&FitConfig) -> LikelihoodKind| SviFactorizer {
            name: name.to_string(),
            kind,
        };
        r.register(Arc::new(svi("ziptf", |_| LikelihoodKind::Zip)));
        r.register(Arc::new(svi("gptf", |_| LikelihoodKind::GammaPoisson)));
        r.register(Arc::new(svi("tgtf", |c| LikelihoodKind::TruncatedGaussian { sigma: c.tg_sigma })));
        r.register(Arc::new(BptfFactorizer));
        r.register(Arc::new(AlsFactorizer));
        r
    }

    /// Adds or replaces a strategy under its own name.
    pub fn register(&mut self, f: Arc<dyn Factorizer>) {
        self.entries.insert(f.name().to_string(), f);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Factorizer>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownMethod(format!("{name} (known: {})", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}
