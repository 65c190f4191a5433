//! Monte-Carlo estimators of `∇ E_q[log p(X, A, ζ)]`.
//!
//! Both strategies share the reparameterized treatment of the Normal
//! inflation latent; they differ only in how the Gamma factor entries are
//! differentiated. The entropy part of the ELBO is handled analytically by
//! the caller.

use ndarray::Array2;

use crate::error::Result;
use crate::prob::{gamma_log_pdf_unchecked, logistic_sigmoid, normal_log_pdf, psi, sample_standard_gamma,
    standard_gamma_shape_grad, Stream};
use crate::tensor::{for_each_index, mttkrp_all_with, reconstruct};

use super::{Problem, SviState};
use rand::Rng;
use rand_distr::StandardNormal;

/// A strategy for the Gamma-latent part of the ELBO gradient.
pub trait GradientEstimator: Send + Sync {
    fn name(&self) -> &'static str;

    /// One-sample estimate. Returns the gradient in the state's flat
    /// parameter layout and the sampled value of `log p(X, A, ζ)`.
    fn estimate(&self, state: &mut SviState, problem: &Problem<'_>, rng: &mut Stream) -> Result<(Vec<f64>, f64)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    ScoreFunction,
    Reparameterized,
}

impl EstimatorKind {
    pub fn build(self, baseline_decay: f64) -> Box<dyn GradientEstimator> {
        match self {
            EstimatorKind::ScoreFunction => Box::new(ScoreFunction { decay: baseline_decay }),
            EstimatorKind::Reparameterized => Box::new(Reparameterized),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "score" | "score-function" => Some(EstimatorKind::ScoreFunction),
            "reparam" | "reparameterized" => Some(EstimatorKind::Reparameterized),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::ScoreFunction => "score-function",
            EstimatorKind::Reparameterized => "reparameterized",
        }
    }
}

/// Draws of every factor entry, plus the standard-gamma variates behind them.
pub(crate) struct FactorDraw {
    pub z: Vec<Array2<f64>>,
    pub g: Vec<Array2<f64>>,
}

pub(crate) fn draw_factors(state: &SviState, rng: &mut Stream) -> FactorDraw {
    let mut z = Vec::with_capacity(state.order());
    let mut g = Vec::with_capacity(state.order());
    for k in 0..state.order() {
        let shape = state.gamma(k);
        let rate = state.delta(k);
        let gk = shape.mapv(|a| sample_standard_gamma(a, rng));
        z.push(&gk / &rate);
        g.push(gk);
    }
    FactorDraw { z, g }
}

/// Draw of the inflation latent: `(ζ, ε)` with `ζ = μ̄ + σ̄ ε`.
pub(crate) fn draw_zeta(state: &SviState, rng: &mut Stream) -> (f64, f64) {
    if !state.zero_inflated() {
        return (f64::NEG_INFINITY, 0.0);
    }
    let eps: f64 = rng.sample(StandardNormal);
    (state.zi_mu() + state.zi_sigma() * eps, eps)
}

fn prior_terms(z: &[Array2<f64>], problem: &Problem<'_>) -> f64 {
    let p = problem.prior;
    z.iter()
        .flat_map(|m| m.iter())
        .map(|&v| gamma_log_pdf_unchecked(v, p.alpha, p.rate))
        .sum()
}

/// Adds the reparameterized ζ gradient and returns the ζ prior term.
fn zeta_gradient(state: &SviState, problem: &Problem<'_>, zeta: f64, eps: f64, d_xi: f64, grad: &mut [f64]) -> f64 {
    if !state.zero_inflated() {
        return 0.0;
    }
    let p = problem.prior;
    let xi = logistic_sigmoid(zeta);
    let d_zeta = d_xi * xi * (1.0 - xi) - (zeta - p.zeta_mean) / (p.zeta_sd * p.zeta_sd);
    let (mu, ls) = state.zi_offsets();
    grad[mu] += d_zeta;
    grad[ls] += d_zeta * state.zi_sigma() * eps;
    normal_log_pdf(zeta, p.zeta_mean, p.zeta_sd)
}

/// Implicit reparameterization: each draw is `z = g/δ` with `g ~ Gamma(γ, 1)`
/// differentiated through its CDF.
#[derive(Debug, Clone, Copy)]
pub struct Reparameterized;

impl GradientEstimator for Reparameterized {
    fn name(&self) -> &'static str {
        "reparameterized"
    }

    fn estimate(&self, state: &mut SviState, problem: &Problem<'_>, rng: &mut Stream) -> Result<(Vec<f64>, f64)> {
        let draw = draw_factors(state, rng);
        let (zeta, eps) = draw_zeta(state, rng);
        let xi = if state.zero_inflated() { logistic_sigmoid(zeta) } else { 0.0 };
        let data = problem.t.data();
        let kind = problem.kind;
        let mut ll = 0.0;
        let mut d_xi = 0.0;
        let dz = mttkrp_all_with(&draw.z, problem.t.shape(), |off, lambda| {
            let e = kind.entry(data[off], lambda, xi);
            ll += e.ll;
            d_xi += e.d_xi;
            e.d_lambda
        });

        let mut grad = vec![0.0; state.n_params()];
        let (alpha, rate) = (problem.prior.alpha, problem.prior.rate);
        for k in 0..state.order() {
            let (so, ro) = state.block_offsets(k);
            let shape = state.gamma(k);
            let delta = state.delta(k);
            let zs = draw.z[k].as_slice().expect("standard layout");
            let gs = draw.g[k].as_slice().expect("standard layout");
            let dk = dz[k].as_slice().expect("standard layout");
            let shape = shape.as_slice().expect("standard layout");
            let delta = delta.as_slice().expect("standard layout");
            for i in 0..zs.len() {
                let z = zs[i];
                let gz = dk[i] + (alpha - 1.0) / z - rate;
                let dzdg = standard_gamma_shape_grad(gs[i], shape[i]) / delta[i];
                grad[so + i] = gz * dzdg * shape[i];
                grad[ro + i] = -gz * z;
            }
        }
        let value = ll + problem.constant + prior_terms(&draw.z, problem) + zeta_gradient(state, problem, zeta, eps, d_xi, &mut grad);
        Ok((grad, value))
    }
}

/// Likelihood-ratio estimator, Rao-Blackwellized so each entry's score only
/// multiplies the log-joint terms that touch it (its prior, and the
/// likelihood of its mode slice), with a moving-average baseline per entry.
#[derive(Debug, Clone, Copy)]
pub struct ScoreFunction {
    pub decay: f64,
}

impl ScoreFunction {
    /// Per-entry local log-joint `f` for every factor entry, flattened in
    /// the order of the shape blocks; also the likelihood total and the
    /// `ξ`-derivative.
    fn local_terms(state: &SviState, problem: &Problem<'_>, z: &[Array2<f64>], xi: f64) -> (Vec<f64>, f64, f64) {
        let shape = problem.t.shape();
        let lambda = reconstruct(z, shape);
        let data = problem.t.data();
        let mut slices: Vec<Vec<f64>> = shape.iter().map(|&d| vec![0.0; d]).collect();
        let mut ll = 0.0;
        let mut d_xi = 0.0;
        for_each_index(shape, |off, idx| {
            let e = problem.kind.entry(data[off], lambda[off], xi);
            ll += e.ll;
            d_xi += e.d_xi;
            for (s, &i) in idx.iter().enumerate() {
                slices[s][i] += e.ll;
            }
        });
        let p = problem.prior;
        let mut local = Vec::with_capacity(state.n_factor_entries());
        for (k, zk) in z.iter().enumerate() {
            for ((j, _), &v) in zk.indexed_iter() {
                local.push(slices[k][j] + gamma_log_pdf_unchecked(v, p.alpha, p.rate));
            }
        }
        (local, ll, d_xi)
    }
}

impl GradientEstimator for ScoreFunction {
    fn name(&self) -> &'static str {
        "score-function"
    }

    fn estimate(&self, state: &mut SviState, problem: &Problem<'_>, rng: &mut Stream) -> Result<(Vec<f64>, f64)> {
        if state.baseline.is_none() {
            // seed the baseline from an independent draw so it never depends
            // on the sample it is subtracted from
            let warm = draw_factors(state, rng);
            let (zeta, _) = draw_zeta(state, rng);
            let xi = if state.zero_inflated() { logistic_sigmoid(zeta) } else { 0.0 };
            state.baseline = Some(Self::local_terms(state, problem, &warm.z, xi).0);
        }
        let draw = draw_factors(state, rng);
        let (zeta, eps) = draw_zeta(state, rng);
        let xi = if state.zero_inflated() { logistic_sigmoid(zeta) } else { 0.0 };
        let (local, ll, d_xi) = Self::local_terms(state, problem, &draw.z, xi);

        let mut grad = vec![0.0; state.n_params()];
        let mut flat = 0;
        let baseline = state.baseline.take().expect("initialized above");
        let mut next = baseline.clone();
        for k in 0..state.order() {
            let (so, ro) = state.block_offsets(k);
            let shape = state.gamma(k);
            let delta = state.delta(k);
            for (i, ((&a, &d), &z)) in shape.iter().zip(delta.iter()).zip(draw.z[k].iter()).enumerate() {
                let centered = local[flat] - baseline[flat];
                let score_shape = a * (d.ln() + z.ln() - psi(a));
                let score_rate = a - d * z;
                grad[so + i] = score_shape * centered;
                grad[ro + i] = score_rate * centered;
                next[flat] = self.decay * baseline[flat] + (1.0 - self.decay) * local[flat];
                flat += 1;
            }
        }
        state.baseline = Some(next);
        let value = ll + problem.constant + prior_terms(&draw.z, problem) + zeta_gradient(state, problem, zeta, eps, d_xi, &mut grad);
        Ok((grad, value))
    }
}
