//! Bayesian Poisson tensor factorization fitted by coordinate-ascent
//! variational inference.
//!
//! Every factor entry has a `Gamma(γ, δ)` variational posterior under a
//! `Gamma(α, αβ_k)` prior. The multinomial auxiliary responsibilities are
//! never stored: each mode update recomputes them from the geometric
//! expectations and folds them straight into the shape update.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::init::InitGuess;
use crate::prob::{ln_gamma, psi, sample_standard_gamma, stream};
use crate::tensor::{mttkrp, reconstruct, FactorModel, Tensor};

/// How the empirical-Bayes prior rate is refreshed after a mode update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateUpdate {
    /// `β_k = 1 / Σ_{j,r} E[a_jr]`.
    Total,
    /// `β_k = I_k R / Σ_{j,r} E[a_jr]`, the stationary point of the ELBO in `β_k`.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaviConfig {
    pub alpha: f64,
    pub max_iter: usize,
    /// Relative ELBO change below which the sweep loop stops.
    pub tol: f64,
    pub seed: u64,
    pub rate_update: RateUpdate,
}

impl Default for CaviConfig {
    fn default() -> Self {
        CaviConfig {
            alpha: 0.1,
            max_iter: 1000,
            tol: 1e-6,
            seed: 0,
            rate_update: RateUpdate::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaviState {
    gamma: Vec<Array2<f64>>,
    delta: Vec<Array2<f64>>,
    alpha: f64,
    beta: Vec<f64>,
    frozen: Option<usize>,
    elbo_trace: Vec<f64>,
}

impl CaviState {
    pub fn new(gamma: Vec<Array2<f64>>, delta: Vec<Array2<f64>>, alpha: f64, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() < 2 || gamma.len() != delta.len() || gamma.len() != beta.len() {
            return Err(Error::invalid("state needs matching gamma, delta and beta per mode"));
        }
        let r = gamma[0].ncols();
        for (g, d) in gamma.iter().zip(&delta) {
            if g.dim() != d.dim() || g.ncols() != r {
                return Err(Error::invalid("gamma and delta blocks must share shape and rank"));
            }
            if g.iter().chain(d.iter()).any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("variational parameters must be positive and finite"));
            }
        }
        if !(alpha > 0.0) || beta.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::invalid("prior shape and rates must be positive"));
        }
        Ok(CaviState {
            gamma,
            delta,
            alpha,
            beta,
            frozen: None,
            elbo_trace: Vec::new(),
        })
    }

    pub fn gamma(&self, mode: usize) -> &Array2<f64> {
        &self.gamma[mode]
    }

    pub fn delta(&self, mode: usize) -> &Array2<f64> {
        &self.delta[mode]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn elbo_trace(&self) -> &[f64] {
        &self.elbo_trace
    }

    pub fn order(&self) -> usize {
        self.gamma.len()
    }

    pub fn rank(&self) -> usize {
        self.gamma[0].ncols()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.gamma.iter().map(|g| g.nrows()).collect()
    }

    /// Posterior means `γ/δ` as a CP model.
    pub fn mean_model(&self) -> FactorModel {
        let factors = (0..self.order()).map(|k| arithmetic(&self.gamma[k], &self.delta[k])).collect();
        FactorModel::new(factors).expect("positive state gives a valid model")
    }
}

fn arithmetic(gamma: &Array2<f64>, delta: &Array2<f64>) -> Array2<f64> {
    gamma / delta
}

/// `exp(ψ(γ) - ln δ)` with every row divided by its maximum, plus the log
/// of those maxima. Responsibilities are invariant to per-row scaling, so
/// the scaled matrix can stand in for the geometric expectation.
fn scaled_geometric(gamma: &Array2<f64>, delta: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut logs = Array2::zeros(gamma.dim());
    ndarray::Zip::from(&mut logs)
        .and(gamma)
        .and(delta)
        .for_each(|l, &g, &d| *l = psi(g) - d.ln());
    let mut row_log_max = Vec::with_capacity(logs.nrows());
    for mut row in logs.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        row_log_max.push(m);
    }
    (logs, row_log_max)
}

/// Arithmetic `γ/δ` and geometric `exp(ψ(γ))/δ` expectations of mode `k`.
pub fn expectations(state: &CaviState, mode: usize) -> (Array2<f64>, Array2<f64>) {
    let g = &state.gamma[mode];
    let d = &state.delta[mode];
    let mut geom = Array2::zeros(g.dim());
    ndarray::Zip::from(&mut geom)
        .and(g)
        .and(d)
        .for_each(|e, &g, &d| *e = psi(g).exp() / d);
    (arithmetic(g, d), geom)
}

fn check_shapes(state: &CaviState, t: &Tensor) -> Result<()> {
    if state.shape() != t.shape() {
        return Err(Error::invalid(format!(
            "state shape {:?} does not match tensor shape {:?}",
            state.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// Closed-form update of `(γ_k, δ_k)` with all other modes held fixed.
pub fn update_mode(state: &mut CaviState, t: &Tensor, mode: usize) -> Result<()> {
    check_shapes(state, t)?;
    if mode >= state.order() {
        return Err(Error::invalid(format!("mode {mode} out of range")));
    }
    let geo: Vec<Array2<f64>> = (0..state.order())
        .map(|s| scaled_geometric(&state.gamma[s], &state.delta[s]).0)
        .collect();
    let lambda = reconstruct(&geo, t.shape());
    let mut weights = vec![0.0; lambda.len()];
    for (i, (&x, &l)) in t.data().iter().zip(&lambda).enumerate() {
        if x != 0.0 {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::degenerate(format!(
                    "responsibility denominator vanished at flat index {i}"
                )));
            }
            weights[i] = x / l;
        }
    }
    let m = mttkrp(&weights, &geo, t.shape(), mode);
    state.gamma[mode] = &geo[mode] * &m + state.alpha;

    let rate = state.alpha * state.beta[mode];
    let mut col = vec![1.0; state.rank()];
    for s in (0..state.order()).filter(|&s| s != mode) {
        let sums = arithmetic(&state.gamma[s], &state.delta[s]).sum_axis(Axis(0));
        for (c, v) in col.iter_mut().zip(sums.iter()) {
            *c *= v;
        }
    }
    for mut row in state.delta[mode].rows_mut() {
        for (d, c) in row.iter_mut().zip(&col) {
            *d = rate + c;
        }
    }
    Ok(())
}

/// Empirical-Bayes refresh of `β_k`; returns the new value.
pub fn update_rate_hyper(state: &mut CaviState, mode: usize, rule: RateUpdate) -> Result<f64> {
    let total: f64 = arithmetic(&state.gamma[mode], &state.delta[mode]).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::degenerate(format!("expectation sum of mode {mode} is {total}")));
    }
    let beta = match rule {
        RateUpdate::Total => 1.0 / total,
        RateUpdate::Mean => state.gamma[mode].len() as f64 / total,
    };
    state.beta[mode] = beta;
    Ok(beta)
}

/// Evidence lower bound under the Poisson likelihood, with the optimal
/// auxiliary responsibilities substituted in.
pub fn elbo(state: &CaviState, t: &Tensor) -> Result<f64> {
    check_shapes(state, t)?;
    let n = state.order();
    let alpha = state.alpha;
    let mut geo = Vec::with_capacity(n);
    let mut row_logs = Vec::with_capacity(n);
    for s in 0..n {
        let (g, l) = scaled_geometric(&state.gamma[s], &state.delta[s]);
        geo.push(g);
        row_logs.push(l);
    }
    let lambda = reconstruct(&geo, t.shape());
    let strides = t.strides();
    let shape = t.shape();
    let mut data = 0.0;
    for (off, (&x, &l)) in t.data().iter().zip(&lambda).enumerate() {
        if x == 0.0 {
            continue;
        }
        let mut log_rate = l.ln();
        for s in 0..n {
            let i = (off / strides[s]) % shape[s];
            log_rate += row_logs[s][i];
        }
        data += x * log_rate - ln_gamma(x + 1.0);
    }
    let mut col = vec![1.0; state.rank()];
    for s in 0..n {
        let sums = arithmetic(&state.gamma[s], &state.delta[s]).sum_axis(Axis(0));
        for (c, v) in col.iter_mut().zip(sums.iter()) {
            *c *= v;
        }
    }
    data -= col.iter().sum::<f64>();

    let mut prior_entropy = 0.0;
    let ln_gamma_alpha = ln_gamma(alpha);
    for s in 0..n {
        let rate = alpha * state.beta[s];
        let ln_rate = rate.ln();
        for (&g, &d) in state.gamma[s].iter().zip(state.delta[s].iter()) {
            let dg = psi(g);
            let ln_d = d.ln();
            let e_log = dg - ln_d;
            prior_entropy += alpha * ln_rate - ln_gamma_alpha + (alpha - 1.0) * e_log - rate * g / d;
            prior_entropy += g - ln_d + ln_gamma(g) + (1.0 - g) * dg;
        }
    }
    Ok(data + prior_entropy)
}

/// Initial state: shapes near 1 with mild `Gamma(100, 100)` jitter, rates
/// tied to the empirical-Bayes prior evaluated at unit rates.
pub fn init_state(shape: &[usize], rank: usize, cfg: &CaviConfig) -> Result<CaviState> {
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::invalid(format!("prior shape must be positive, got {}", cfg.alpha)));
    }
    let mut rng = stream(cfg.seed);
    let mut gamma = Vec::with_capacity(shape.len());
    let mut delta = Vec::with_capacity(shape.len());
    let mut beta = Vec::with_capacity(shape.len());
    for &d in shape {
        let g = Array2::from_shape_fn((d, rank), |_| sample_standard_gamma(100.0, &mut rng) / 100.0);
        let b = match cfg.rate_update {
            RateUpdate::Total => 1.0 / g.sum(),
            RateUpdate::Mean => g.len() as f64 / g.sum(),
        };
        delta.push(Array2::from_elem((d, rank), cfg.alpha * b));
        gamma.push(g);
        beta.push(b);
    }
    CaviState::new(gamma, delta, cfg.alpha, beta)
}

const INIT_SHAPE: f64 = 100.0;
const INIT_FLOOR: f64 = 1e-10;

fn apply_init(state: &mut CaviState, init: &InitGuess) -> Result<()> {
    init.validate(&state.shape(), state.rank())?;
    let k = init.mode;
    state.gamma[k] = Array2::from_elem(init.matrix.dim(), INIT_SHAPE);
    state.delta[k] = init.matrix.mapv(|v| INIT_SHAPE / v.max(INIT_FLOOR));
    if init.freeze {
        state.frozen = Some(k);
    }
    Ok(())
}

/// Cyclic CAVI until the relative ELBO change drops below `cfg.tol`.
pub fn fit_bptf(t: &Tensor, rank: usize, cfg: &CaviConfig) -> Result<(FactorModel, CaviState)> {
    fit_bptf_from(t, rank, cfg, None)
}

pub fn fit_bptf_from(
    t: &Tensor,
    rank: usize,
    cfg: &CaviConfig,
    init: Option<&InitGuess>,
) -> Result<(FactorModel, CaviState)> {
    let mut state = init_state(t.shape(), rank, cfg)?;
    if let Some(g) = init {
        apply_init(&mut state, g)?;
    }
    let mut prev = f64::NAN;
    for _ in 0..cfg.max_iter {
        for k in 0..state.order() {
            if state.frozen == Some(k) {
                continue;
            }
            update_mode(&mut state, t, k)?;
            update_rate_hyper(&mut state, k, cfg.rate_update)?;
        }
        let value = elbo(&state, t)?;
        if !value.is_finite() {
            return Err(Error::degenerate(format!("ELBO became {value}")));
        }
        state.elbo_trace.push(value);
        if prev.is_finite() && ((value - prev) / value.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tol {
            break;
        }
        prev = value;
    }
    Ok((state.mean_model(), state))
}
