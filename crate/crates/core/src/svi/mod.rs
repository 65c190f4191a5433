//! Black-box stochastic variational inference for Gamma-prior CP models
//! under three observation models.
//!
//! Guide: every factor entry is an independent `Gamma(γ, δ)`; the global
//! inflation logit `ζ` is `Normal(μ̄, σ̄)` and `ξ = S(ζ)`. All optimization
//! happens on `ln γ`, `ln δ`, `μ̄` and `ln σ̄` with Adam.

mod adam;
mod estimator;
mod likelihood;

pub use adam::Adam;
pub use estimator::{EstimatorKind, GradientEstimator, Reparameterized, ScoreFunction};
pub use likelihood::LikelihoodKind;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, ParamCoord, Result};
use crate::init::{match_mean, InitGuess};
use crate::prob::{derive_seed, gamma_entropy, gamma_log_pdf_unchecked, logistic_sigmoid, normal_log_pdf,
    stream, trigamma, Stream};
use crate::tensor::{reconstruct, FactorModel, Tensor};

/// Hyperparameters of the generative model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Gamma prior shape for every factor entry.
    pub alpha: f64,
    /// Gamma prior rate for every factor entry.
    pub rate: f64,
    pub zeta_mean: f64,
    pub zeta_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            alpha: 0.1,
            rate: 1.0,
            zeta_mean: -2.0,
            zeta_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SviConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    /// The step size decays geometrically to this value at the last step.
    pub final_learning_rate: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub prior: PriorConfig,
    pub estimator: EstimatorKind,
    pub baseline_decay: f64,
    /// Variational shape every factor entry starts from.
    pub init_shape: f64,
    /// Window of the moving average reported as the final ELBO.
    pub smooth_window: usize,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig {
            max_steps: 1000,
            learning_rate: 0.05,
            final_learning_rate: 0.005,
            n_samples: 1,
            seed: 0,
            prior: PriorConfig::default(),
            estimator: EstimatorKind::Reparameterized,
            baseline_decay: 0.9,
            init_shape: 1000.0,
            smooth_window: 50,
        }
    }
}

/// The data side of a fit, fixed for its whole duration.
pub struct Problem<'a> {
    pub t: &'a Tensor,
    pub prior: &'a PriorConfig,
    pub kind: LikelihoodKind,
    constant: f64,
}

impl<'a> Problem<'a> {
    pub fn new(t: &'a Tensor, prior: &'a PriorConfig, kind: LikelihoodKind) -> Result<Self> {
        if !(prior.alpha > 0.0 && prior.rate > 0.0 && prior.zeta_sd > 0.0) {
            return Err(Error::invalid("prior shape, rate and zeta scale must be positive"));
        }
        if let LikelihoodKind::TruncatedGaussian { sigma } = kind {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("observation deviation must be positive, got {sigma}")));
            }
        }
        if kind.needs_counts() && !t.is_count() {
            return Err(Error::invalid(format!("{} likelihood needs integer counts", kind.name())));
        }
        Ok(Problem {
            t,
            prior,
            kind,
            constant: kind.constant(t),
        })
    }
}

/// Variational parameters in one flat vector:
/// `[ln γ_0, ln δ_0, ln γ_1, ln δ_1, .., μ̄, ln σ̄]`, each block row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SviState {
    shape: Vec<usize>,
    rank: usize,
    zero_inflated: bool,
    params: Vec<f64>,
    mask: Vec<bool>,
    adam: Adam,
    pub(crate) baseline: Option<Vec<f64>>,
    step: usize,
    elbo_trace: Vec<f64>,
}

/// A joint draw from the guide.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub factors: Vec<Array2<f64>>,
    /// Inflation logit; `-inf` when the likelihood has no inflation.
    pub zeta: f64,
}

impl SviState {
    /// Builds a state from constrained values. `zi` is `(μ̄, σ̄)` for
    /// zero-inflated models.
    pub fn new(gamma: &[Array2<f64>], delta: &[Array2<f64>], zi: Option<(f64, f64)>) -> Result<Self> {
        if gamma.len() < 2 || gamma.len() != delta.len() {
            return Err(Error::invalid("need matching shape and rate blocks for at least two modes"));
        }
        let rank = gamma[0].ncols();
        let mut params = Vec::new();
        for (g, d) in gamma.iter().zip(delta) {
            if g.dim() != d.dim() || g.ncols() != rank {
                return Err(Error::invalid("shape and rate blocks must agree"));
            }
            if g.iter().chain(d.iter()).any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("variational shapes and rates must be positive"));
            }
            params.extend(g.iter().map(|v| v.ln()));
            params.extend(d.iter().map(|v| v.ln()));
        }
        let zero_inflated = zi.is_some();
        let (mu, sigma) = zi.unwrap_or((0.0, 1.0));
        if !(sigma > 0.0) || !mu.is_finite() {
            return Err(Error::invalid("inflation guide needs finite mean and positive scale"));
        }
        params.push(mu);
        params.push(sigma.ln());
        let n = params.len();
        let mut mask = vec![true; n];
        if !zero_inflated {
            mask[n - 2] = false;
            mask[n - 1] = false;
        }
        Ok(SviState {
            shape: gamma.iter().map(|g| g.nrows()).collect(),
            rank,
            zero_inflated,
            params,
            mask,
            adam: Adam::new(n),
            baseline: None,
            step: 0,
            elbo_trace: Vec::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn zero_inflated(&self) -> bool {
        self.zero_inflated
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn elbo_trace(&self) -> &[f64] {
        &self.elbo_trace
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn n_factor_entries(&self) -> usize {
        self.shape.iter().sum::<usize>() * self.rank
    }

    /// Flat offsets of mode `k`'s `ln γ` and `ln δ` blocks.
    pub(crate) fn block_offsets(&self, k: usize) -> (usize, usize) {
        let before: usize = self.shape[..k].iter().sum::<usize>() * self.rank * 2;
        (before, before + self.shape[k] * self.rank)
    }

    pub(crate) fn zi_offsets(&self) -> (usize, usize) {
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn block(&self, start: usize, k: usize) -> ArrayView2<'_, f64> {
        let n = self.shape[k] * self.rank;
        ArrayView2::from_shape((self.shape[k], self.rank), &self.params[start..start + n]).expect("block layout")
    }

    pub fn gamma(&self, k: usize) -> Array2<f64> {
        self.block(self.block_offsets(k).0, k).mapv(f64::exp)
    }

    pub fn delta(&self, k: usize) -> Array2<f64> {
        self.block(self.block_offsets(k).1, k).mapv(f64::exp)
    }

    pub fn zi_mu(&self) -> f64 {
        self.params[self.params.len() - 2]
    }

    pub fn zi_sigma(&self) -> f64 {
        self.params[self.params.len() - 1].exp()
    }

    /// Stops optimizing mode `k`.
    pub fn freeze_mode(&mut self, k: usize) {
        let (so, _) = self.block_offsets(k);
        let n = 2 * self.shape[k] * self.rank;
        self.mask[so..so + n].iter_mut().for_each(|m| *m = false);
    }

    /// Variational means `γ/δ` as a CP model.
    pub fn mean_model(&self) -> FactorModel {
        let factors = (0..self.order()).map(|k| self.gamma(k) / self.delta(k)).collect();
        FactorModel::new(factors).expect("positive parameters give a valid model")
    }

    /// Monte-Carlo estimate of `E[S(ζ)]`; `None` without inflation.
    pub fn zero_inflation_mean(&self, draws: usize, rng: &mut Stream) -> Option<f64> {
        if !self.zero_inflated {
            return None;
        }
        let (mu, sd) = (self.zi_mu(), self.zi_sigma());
        let total: f64 = (0..draws)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                logistic_sigmoid(mu + sd * e)
            })
            .sum();
        Some(total / draws as f64)
    }

    /// Entropy of the guide.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for k in 0..self.order() {
            let g = self.gamma(k);
            let d = self.delta(k);
            h += g.iter().zip(d.iter()).map(|(&a, &b)| gamma_entropy(a, b)).sum::<f64>();
        }
        if self.zero_inflated {
            h += 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + self.params[self.params.len() - 1];
        }
        h
    }

    /// Adds the analytic entropy gradient to `grad`.
    fn add_entropy_gradient(&self, grad: &mut [f64]) {
        for k in 0..self.order() {
            let (so, ro) = self.block_offsets(k);
            let n = self.shape[k] * self.rank;
            for i in 0..n {
                let a = self.params[so + i].exp();
                grad[so + i] += a * (1.0 + (1.0 - a) * trigamma(a));
                grad[ro + i] -= 1.0;
            }
        }
        if self.zero_inflated {
            grad[self.params.len() - 1] += 1.0;
        }
    }

    fn coord_of(&self, flat: usize) -> ParamCoord {
        let (mu, _) = self.zi_offsets();
        if flat == mu {
            return ParamCoord::ZeroInflationMean;
        }
        if flat == mu + 1 {
            return ParamCoord::ZeroInflationScale;
        }
        for k in 0..self.order() {
            let (so, ro) = self.block_offsets(k);
            let n = self.shape[k] * self.rank;
            if flat < ro + n {
                let (is_rate, i) = if flat >= ro { (true, flat - ro) } else { (false, flat - so) };
                let (row, col) = (i / self.rank, i % self.rank);
                return if is_rate {
                    ParamCoord::Rate { mode: k, row, col }
                } else {
                    ParamCoord::Shape { mode: k, row, col }
                };
            }
        }
        unreachable!("flat index inside parameter vector")
    }
}

/// Samples every latent from the guide and returns the draw with its joint
/// variational log-density.
pub fn guide_sample(state: &SviState, rng: &mut Stream) -> (Draw, f64) {
    let fd = estimator::draw_factors(state, rng);
    let (zeta, _) = estimator::draw_zeta(state, rng);
    let mut log_q = 0.0;
    for k in 0..state.order() {
        let g = state.gamma(k);
        let d = state.delta(k);
        for ((&z, &a), &b) in fd.z[k].iter().zip(g.iter()).zip(d.iter()) {
            log_q += gamma_log_pdf_unchecked(z, a, b);
        }
    }
    if state.zero_inflated {
        log_q += normal_log_pdf(zeta, state.zi_mu(), state.zi_sigma());
    }
    (Draw { factors: fd.z, zeta }, log_q)
}

/// `log p(X, A, ζ)` for a draw: Gamma priors, the Normal prior on `ζ` when
/// the likelihood is inflated, and the likelihood at `λ = [[A]]`.
pub fn log_joint(draw: &Draw, problem: &Problem<'_>) -> Result<f64> {
    if draw.factors.iter().flat_map(|f| f.iter()).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("factor draws must be positive"));
    }
    let shape = problem.t.shape();
    if draw.factors.len() != shape.len() || draw.factors.iter().zip(shape).any(|(f, &d)| f.nrows() != d) {
        return Err(Error::invalid("draw does not match the tensor shape"));
    }
    let inflated = problem.kind.zero_inflated();
    let mut value = log_prior(draw, problem.prior, inflated);
    let xi = if inflated { logistic_sigmoid(draw.zeta) } else { 0.0 };
    let lambda = reconstruct(&draw.factors, shape);
    for (&x, &l) in problem.t.data().iter().zip(&lambda) {
        value += problem.kind.entry(x, l, xi).ll;
    }
    Ok(value + problem.constant)
}

/// Prior part of [`log_joint`].
pub fn log_prior(draw: &Draw, prior: &PriorConfig, zero_inflated: bool) -> f64 {
    let mut value: f64 = draw
        .factors
        .iter()
        .flat_map(|f| f.iter())
        .map(|&v| gamma_log_pdf_unchecked(v, prior.alpha, prior.rate))
        .sum();
    if zero_inflated {
        value += normal_log_pdf(draw.zeta, prior.zeta_mean, prior.zeta_sd);
    }
    value
}

/// `(1/S) Σ_s [log p(draw_s) − log q(draw_s)]`.
pub fn elbo_estimate(state: &SviState, problem: &Problem<'_>, n_samples: usize, rng: &mut Stream) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut total = 0.0;
    for _ in 0..n_samples {
        let (draw, log_q) = guide_sample(state, rng);
        total += log_joint(&draw, problem)? - log_q;
    }
    Ok(total / n_samples as f64)
}

/// Full ELBO gradient averaged over `n_samples` draws, with analytic entropy
/// terms, and the matching single-draw ELBO values' mean.
pub fn elbo_gradient(
    state: &mut SviState,
    problem: &Problem<'_>,
    estimator: &dyn GradientEstimator,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<(Vec<f64>, f64)> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut grad = vec![0.0; state.n_params()];
    let mut value = 0.0;
    for _ in 0..n_samples {
        let (g, v) = estimator.estimate(state, problem, rng)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        value += v;
    }
    let inv = 1.0 / n_samples as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    state.add_entropy_gradient(&mut grad);
    for (g, &m) in grad.iter_mut().zip(&state.mask) {
        if !m {
            *g = 0.0;
        }
    }
    Ok((grad, value * inv + state.entropy()))
}

/// One Adam ascent step on the ELBO.
pub fn svi_step(
    state: &mut SviState,
    problem: &Problem<'_>,
    estimator: &dyn GradientEstimator,
    n_samples: usize,
    learning_rate: f64,
    rng: &mut Stream,
) -> Result<()> {
    let (grad, value) = elbo_gradient(state, problem, estimator, n_samples, rng)?;
    let bad: Vec<ParamCoord> = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_finite())
        .map(|(i, _)| state.coord_of(i))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteGradient { coordinates: bad });
    }
    let mask = std::mem::take(&mut state.mask);
    state.adam.ascend(&mut state.params, &grad, learning_rate, &mask);
    state.mask = mask;
    state.step += 1;
    state.elbo_trace.push(value);
    Ok(())
}

/// What a finished fit reports besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SviReport {
    pub steps: usize,
    /// Mean of the last `smooth_window` trace values.
    pub smoothed_elbo: f64,
    /// `E[S(ζ)]` for inflated likelihoods.
    pub zero_inflation: Option<f64>,
}

const ZERO_LOGIT_CLAMP: f64 = 4.0;
const INIT_ZETA_SCALE: f64 = 0.1;
const INIT_MEAN_FLOOR: f64 = 1e-3;
const INIT_VALUE_FLOOR: f64 = 1e-8;

/// Starting guide: means jittered around the level that makes the
/// reconstruction match the data mean, inflation logit at the observed zero
/// fraction.
pub fn init_state(t: &Tensor, rank: usize, kind: LikelihoodKind, cfg: &SviConfig, guess: Option<&InitGuess>) -> Result<SviState> {
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    if !(cfg.init_shape > 0.0) {
        return Err(Error::invalid("initial variational shape must be positive"));
    }
    let mut rng = stream(derive_seed(cfg.seed, 0));
    let zi = if kind.zero_inflated() {
        let zf = t.zero_fraction();
        let logit = (zf / (1.0 - zf)).ln();
        Some((logit.clamp(-ZERO_LOGIT_CLAMP, ZERO_LOGIT_CLAMP), INIT_ZETA_SCALE))
    } else {
        None
    };
    let keep = zi.map_or(1.0, |(mu, _)| 1.0 - logistic_sigmoid(mu));
    let target = (t.mean() / keep).max(INIT_MEAN_FLOOR);
    let shape = t.shape();
    let level = (target / rank as f64).powf(1.0 / shape.len() as f64);
    let mut means: Vec<Array2<f64>> = shape
        .iter()
        .map(|&d| Array2::from_shape_fn((d, rank), |_| level * rng.gen_range(0.5..1.5)))
        .collect();
    let mut frozen = None;
    if let Some(g) = guess {
        g.validate(shape, rank)?;
        means[g.mode] = g.matrix.mapv(|v| v.max(INIT_VALUE_FLOOR));
        if g.freeze {
            frozen = Some(g.mode);
        }
        match_mean(&mut means, shape, target, frozen);
    }
    let gamma: Vec<Array2<f64>> = means.iter().map(|m| Array2::from_elem(m.dim(), cfg.init_shape)).collect();
    let delta: Vec<Array2<f64>> = means.iter().map(|m| m.mapv(|v| cfg.init_shape / v)).collect();
    let mut state = SviState::new(&gamma, &delta, zi)?;
    if let Some(k) = frozen {
        state.freeze_mode(k);
    }
    Ok(state)
}

/// Runs the full optimization and returns the variational-mean model.
pub fn fit_svi(
    t: &Tensor,
    rank: usize,
    kind: LikelihoodKind,
    cfg: &SviConfig,
    guess: Option<&InitGuess>,
) -> Result<(FactorModel, SviState, SviReport)> {
    if cfg.max_steps == 0 || cfg.n_samples == 0 {
        return Err(Error::invalid("need at least one step and one sample"));
    }
    let problem = Problem::new(t, &cfg.prior, kind)?;
    let mut state = init_state(t, rank, kind, cfg, guess)?;
    let estimator = cfg.estimator.build(cfg.baseline_decay);
    let mut rng = stream(derive_seed(cfg.seed, 1));
    let decay = if cfg.max_steps > 1 {
        (cfg.final_learning_rate / cfg.learning_rate).powf(1.0 / (cfg.max_steps - 1) as f64)
    } else {
        1.0
    };
    let mut lr = cfg.learning_rate;
    for _ in 0..cfg.max_steps {
        svi_step(&mut state, &problem, estimator.as_ref(), cfg.n_samples, lr, &mut rng)?;
        lr *= decay;
    }
    let trace = state.elbo_trace();
    let w = cfg.smooth_window.clamp(1, trace.len());
    let smoothed = trace[trace.len() - w..].iter().sum::<f64>() / w as f64;
    let mut zrng = stream(derive_seed(cfg.seed, 2));
    let report = SviReport {
        steps: state.step(),
        smoothed_elbo: smoothed,
        zero_inflation: state.zero_inflation_mean(1000, &mut zrng),
    };
    Ok((state.mean_model(), state, report))
}
