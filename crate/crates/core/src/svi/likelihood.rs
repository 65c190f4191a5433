//! Observation models tying a CP rate `λ_I` to an entry `x_I`.

use statrs::function::erf::erfc;

use crate::prob::ln_gamma;
use crate::tensor::Tensor;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodKind {
    /// Zero-inflated Poisson with one global inflation latent; the
    /// per-entry Bernoulli mask is summed out.
    Zip,
    /// Plain Poisson likelihood under the same Gamma priors.
    GammaPoisson,
    /// `Normal(x; λ, σ)` renormalized to `[0, ∞)`.
    TruncatedGaussian { sigma: f64 },
}

/// One entry's log-density (up to [`LikelihoodKind::constant`]) and its
/// partial derivatives in `λ` and in the inflation probability `ξ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EntryTerms {
    pub ll: f64,
    pub d_lambda: f64,
    pub d_xi: f64,
}

impl LikelihoodKind {
    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodKind::Zip => "zip",
            LikelihoodKind::GammaPoisson => "gamma_poisson",
            LikelihoodKind::TruncatedGaussian { .. } => "truncated_gaussian",
        }
    }

    pub fn zero_inflated(&self) -> bool {
        matches!(self, LikelihoodKind::Zip)
    }

    /// Whether entries must be non-negative integers.
    pub fn needs_counts(&self) -> bool {
        !matches!(self, LikelihoodKind::TruncatedGaussian { .. })
    }

    /// Sum over all entries of the parts of the log-density that depend on
    /// neither `λ` nor `ξ`.
    pub(crate) fn constant(&self, t: &Tensor) -> f64 {
        match self {
            LikelihoodKind::Zip | LikelihoodKind::GammaPoisson => {
                -t.data().iter().filter(|&&x| x != 0.0).map(|&x| ln_gamma(x + 1.0)).sum::<f64>()
            }
            LikelihoodKind::TruncatedGaussian { sigma } => -(t.len() as f64) * (LN_SQRT_2PI + sigma.ln()),
        }
    }

    #[inline]
    pub(crate) fn entry(&self, x: f64, lambda: f64, xi: f64) -> EntryTerms {
        match *self {
            LikelihoodKind::Zip => {
                if x == 0.0 {
                    let e = (-lambda).exp();
                    let p = xi + (1.0 - xi) * e;
                    EntryTerms {
                        ll: p.ln(),
                        d_lambda: -(1.0 - xi) * e / p,
                        d_xi: (1.0 - e) / p,
                    }
                } else {
                    EntryTerms {
                        ll: (1.0 - xi).ln() + x * lambda.ln() - lambda,
                        d_lambda: x / lambda - 1.0,
                        d_xi: -1.0 / (1.0 - xi),
                    }
                }
            }
            LikelihoodKind::GammaPoisson => {
                let ll = if x == 0.0 { -lambda } else { x * lambda.ln() - lambda };
                EntryTerms {
                    ll,
                    d_lambda: x / lambda - 1.0,
                    d_xi: 0.0,
                }
            }
            LikelihoodKind::TruncatedGaussian { sigma } => {
                let r = (x - lambda) / sigma;
                let z = lambda / sigma;
                // Φ(z) for z > 0, and the hazard φ(z)/Φ(z)
                let cdf = 1.0 - 0.5 * erfc(z * std::f64::consts::FRAC_1_SQRT_2);
                let pdf = (-0.5 * z * z - LN_SQRT_2PI).exp();
                EntryTerms {
                    ll: -0.5 * r * r - cdf.ln(),
                    d_lambda: r / sigma - pdf / (cdf * sigma),
                    d_xi: 0.0,
                }
            }
        }
    }
}
