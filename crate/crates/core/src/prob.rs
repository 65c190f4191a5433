//! Probability kernels shared by the inference engines and the generators.
//!
//! Every sampler takes an explicit [`Stream`]; nothing in the crate touches
//! thread-local or global randomness.

use rand::distributions::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

use crate::error::{Error, Result};

pub use statrs::function::gamma::ln_gamma;

/// Seeded random stream. One stream per execution context.
pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic child seed for run `index` of a family rooted at `base`
/// (splitmix64 finalizer over the pair).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipParams {
    lambda: f64,
    p: f64,
}

impl ZipParams {
    pub fn new(lambda: f64, p: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("ZIP rate must be positive, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("ZIP zero probability must be in [0,1], got {p}")));
        }
        Ok(ZipParams { lambda, p })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    shape: f64,
    rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
            return Err(Error::invalid(format!(
                "Gamma parameters must be positive, got shape {shape} rate {rate}"
            )));
        }
        Ok(GammaParams { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

pub fn zip_log_pmf(x: i64, zp: &ZipParams) -> Result<f64> {
    if x < 0 {
        return Err(Error::invalid(format!("ZIP support is x >= 0, got {x}")));
    }
    Ok(zip_log_pmf_f64(x as f64, zp.lambda, zp.p))
}

/// Unchecked form for the hot loops. `x` may be any non-negative real;
/// `ln Γ(x + 1)` supplies the normalizer.
pub(crate) fn zip_log_pmf_f64(x: f64, lambda: f64, p: f64) -> f64 {
    if x == 0.0 {
        if p >= 1.0 {
            return 0.0;
        }
        (p + (1.0 - p) * (-lambda).exp()).ln()
    } else {
        if p >= 1.0 {
            return f64::NEG_INFINITY;
        }
        (1.0 - p).ln() + poisson_log_pmf_f64(x, lambda)
    }
}

pub(crate) fn poisson_log_pmf_f64(x: f64, lambda: f64) -> f64 {
    if x == 0.0 {
        -lambda
    } else {
        x * lambda.ln() - lambda - ln_gamma(x + 1.0)
    }
}

/// One draw of `Bernoulli(1 - p) * Poisson(lambda)`.
pub fn sample_zip(zp: &ZipParams, rng: &mut Stream) -> u64 {
    let keep = rng.gen::<f64>() >= zp.p;
    let count = sample_poisson(zp.lambda, rng);
    if keep {
        count
    } else {
        0
    }
}

pub fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let d = Poisson::new(lambda).expect("positive finite rate");
    d.sample(rng) as u64
}

pub fn gamma_log_pdf(x: f64, gp: &GammaParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::invalid(format!("Gamma density needs x > 0, got {x}")));
    }
    Ok(gamma_log_pdf_unchecked(x, gp.shape, gp.rate))
}

pub(crate) fn gamma_log_pdf_unchecked(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Marsaglia–Tsang squeeze sampler for `Gamma(shape, 1)`; shapes below one
/// are boosted through `Gamma(shape + 1) * U^(1/shape)`.
pub fn sample_standard_gamma(shape: f64, rng: &mut impl Rng) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let u: f64 = rng.sample(Open01);
        let g = sample_standard_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
        return g.max(f64::MIN_POSITIVE);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn sample_gamma(gp: &GammaParams, rng: &mut impl Rng) -> f64 {
    sample_standard_gamma(gp.shape, rng) / gp.rate
}

pub fn sample_normal(mean: f64, sd: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

/// Logistic sigmoid, stable over the whole real line.
pub fn logistic_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const DIGAMMA_MIN_ARG: f64 = 1e-300;

pub fn digamma(x: f64) -> Result<f64> {
    if !(x >= DIGAMMA_MIN_ARG) || !x.is_finite() {
        return Err(Error::invalid(format!("digamma needs x >= 1e-300, got {x}")));
    }
    Ok(psi(x))
}

/// Digamma without the domain check: upward recurrence to x >= 10, then the
/// asymptotic series (absolute error below 1e-14 there).
pub(crate) fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Trigamma (derivative of digamma) for x > 0.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + series
}

/// Entropy of `Gamma(shape, rate)`.
pub(crate) fn gamma_entropy(shape: f64, rate: f64) -> f64 {
    shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * psi(shape)
}

/// Above this shape the cube-root approximation is within 1e-4 relative.
const WILSON_HILFERTY_MIN_SHAPE: f64 = 200.0;

/// Derivative of a `Gamma(alpha, 1)` draw `z` with respect to `alpha`,
/// holding its CDF value fixed (implicit reparameterization):
/// `dz/dα = -(∂F/∂α)(z; α) / f(z; α)`.
///
/// Uses the series for the regularized lower incomplete gamma function,
/// differentiated term-wise and divided through by the density so no
/// `ln Γ` evaluations are needed. Large shapes and far upper-tail draws
/// use the Wilson–Hilferty cube-root approximation instead.
pub fn standard_gamma_shape_grad(z: f64, alpha: f64) -> f64 {
    if alpha > WILSON_HILFERTY_MIN_SHAPE || z > alpha + 10.0 * alpha.sqrt() + 30.0 {
        return wilson_hilferty_shape_grad(z, alpha);
    }
    series_shape_grad(z, alpha)
}

fn series_shape_grad(z: f64, alpha: f64) -> f64 {
    let ln_z = z.ln();
    let mut psi_n = psi(alpha + 1.0);
    let mut c = z / alpha;
    let mut sum = c * (ln_z - psi_n);
    let mut n = 0.0;
    let past_peak = z - alpha;
    while n < 1.0e6 {
        n += 1.0;
        psi_n += 1.0 / (alpha + n);
        c *= z / (alpha + n);
        let term = c * (ln_z - psi_n);
        sum += term;
        if n > past_peak && c * (1.0 + (ln_z - psi_n).abs()) <= 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    -sum
}

fn wilson_hilferty_shape_grad(z: f64, alpha: f64) -> f64 {
    let w = (z / alpha).cbrt();
    let sd = (1.0 / (9.0 * alpha)).sqrt();
    let eps = (w - 1.0 + 1.0 / (9.0 * alpha)) / sd;
    let h = 1.0 - 1.0 / (9.0 * alpha) + eps / (3.0 * alpha.sqrt());
    let dh = 1.0 / (9.0 * alpha * alpha) - eps / (6.0 * alpha.powf(1.5));
    h * h * h + 3.0 * alpha * h * h * dh
}
