//! Non-negative CP decomposition by alternating hierarchical least squares.
//!
//! Each sweep updates the modes in turn; within a mode every column is the
//! exact non-negative minimizer of the Frobenius residual with the other
//! columns fixed, so the objective can only go down.

use log::warn;
use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{match_mean, InitGuess};
use crate::prob::stream;
use crate::tensor::{frobenius_norm, mttkrp, reconstruct, FactorModel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsConfig {
    pub max_iter: usize,
    /// Stop once the relative residual changes by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            max_iter: 1000,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOutcome {
    pub model: FactorModel,
    /// `‖X − X̃‖_F` after every sweep.
    pub residual_trace: Vec<f64>,
}

fn residual(t: &Tensor, factors: &[Array2<f64>]) -> f64 {
    let recon = reconstruct(factors, t.shape());
    t.data().iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn gram_except(factors: &[Array2<f64>], mode: usize) -> Array2<f64> {
    let r = factors[0].ncols();
    let mut g = Array2::from_elem((r, r), 1.0);
    for (s, f) in factors.iter().enumerate() {
        if s != mode {
            g *= &f.t().dot(f);
        }
    }
    g
}

/// One pass of column-wise updates for `mode`.
fn update_mode(t: &Tensor, factors: &mut [Array2<f64>], mode: usize) {
    let m = mttkrp(t.data(), factors, t.shape(), mode);
    let g = gram_except(factors, mode);
    let r = g.nrows();
    let a = &mut factors[mode];
    for c in 0..r {
        let gcc = g[[c, c]];
        if gcc <= 0.0 {
            continue;
        }
        // a_c ← max(0, (M_c − Σ_{j≠c} a_j G_jc) / G_cc)
        let ag = a.dot(&g.column(c));
        let col = a.column(c).to_owned();
        let mut out = a.column_mut(c);
        for i in 0..out.len() {
            let v = col[i] + (m[[i, c]] - ag[i]) / gcc;
            out[i] = v.max(0.0);
        }
    }
}

pub fn fit_nncp_als(t: &Tensor, rank: usize, cfg: &AlsConfig) -> Result<AlsOutcome> {
    fit_nncp_als_from(t, rank, cfg, None)
}

pub fn fit_nncp_als_from(t: &Tensor, rank: usize, cfg: &AlsConfig, init: Option<&InitGuess>) -> Result<AlsOutcome> {
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let shape = t.shape();
    let total: usize = shape.iter().product();
    if shape.iter().any(|&d| rank > total / d) {
        warn!("rank {rank} exceeds the column count of an unfolding of {shape:?}; the model is overcomplete");
    }
    if frobenius_norm(t) == 0.0 {
        warn!("all-zero tensor; returning all-zero factors");
        let factors = shape.iter().map(|&d| Array2::zeros((d, rank))).collect();
        return Ok(AlsOutcome {
            model: FactorModel::new(factors)?,
            residual_trace: vec![0.0],
        });
    }
    let mut rng = stream(cfg.seed);
    let mut factors: Vec<Array2<f64>> = shape
        .iter()
        .map(|&d| Array2::from_shape_fn((d, rank), |_| rng.gen::<f64>()))
        .collect();
    let mut frozen = None;
    if let Some(g) = init {
        g.validate(shape, rank)?;
        factors[g.mode] = g.matrix.clone();
        if g.freeze {
            frozen = Some(g.mode);
        }
    }
    match_mean(&mut factors, shape, t.mean(), frozen);

    let norm = frobenius_norm(t);
    let mut trace = Vec::new();
    let mut prev = residual(t, &factors);
    for _ in 0..cfg.max_iter {
        for k in 0..shape.len() {
            if frozen != Some(k) {
                update_mode(t, &mut factors, k);
            }
        }
        let res = residual(t, &factors);
        trace.push(res);
        if ((prev - res) / norm).abs() < cfg.tol {
            break;
        }
        prev = res;
    }
    // a column that collapsed in one mode carries no signal in the others
    for c in 0..rank {
        if factors.iter().any(|f| f.column(c).iter().all(|&v| v == 0.0)) {
            for f in factors.iter_mut() {
                f.column_mut(c).fill(0.0);
            }
        }
    }
    debug_assert!(factors.iter().all(|f| f.sum_axis(Axis(0)).iter().all(|v| *v >= 0.0)));
    Ok(AlsOutcome {
        model: FactorModel::new(factors)?,
        residual_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic_tensor, SyntheticTensorSpec};
    use crate::metrics::explained_variance;
    use crate::tensor::cp_reconstruct;
    use ndarray::array;

    #[test]
    fn exact_rank_one_recovery() {
        let m = FactorModel::new(vec![array![[1.0], [2.0], [0.5]], array![[3.0], [1.0]], array![[2.0], [1.0], [4.0], [1.0]]])
            .unwrap();
        let t = cp_reconstruct(&m);
        let out = fit_nncp_als(&t, 1, &AlsConfig::default()).unwrap();
        assert!(explained_variance(&t, &out.model).unwrap() >= 0.999);
    }

    #[test]
    fn residual_is_monotone_and_factors_non_negative() {
        for seed in 0..8 {
            let data = gen_synthetic_tensor(&SyntheticTensorSpec::new(vec![5, 6, 7], 3, 0.4, seed)).unwrap();
            let cfg = AlsConfig {
                max_iter: 200,
                tol: 0.0,
                seed,
            };
            let out = fit_nncp_als(&data.observed, 4, &cfg).unwrap();
            for w in out.residual_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "residual rose from {} to {}", w[0], w[1]);
            }
            assert!(out.model.factors().iter().all(|f| f.iter().all(|&v| v >= 0.0)));
        }
    }

    #[test]
    fn noiseless_low_rank_fits_well() {
        let data = gen_synthetic_tensor(&SyntheticTensorSpec::new(vec![8, 9, 10], 3, 0.0, 2)).unwrap();
        let out = fit_nncp_als(&data.observed, 3, &AlsConfig::default()).unwrap();
        assert!(explained_variance(&data.observed, &out.model).unwrap() >= 0.95);
    }

    #[test]
    fn zero_tensor_gives_zero_factors() {
        let t = Tensor::zeros(vec![2, 3, 4]).unwrap();
        let out = fit_nncp_als(&t, 2, &AlsConfig::default()).unwrap();
        assert!(out.model.factors().iter().all(|f| f.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn deterministic_given_seed() {
        let data = gen_synthetic_tensor(&SyntheticTensorSpec::new(vec![4, 5, 6], 2, 0.3, 4)).unwrap();
        let cfg = AlsConfig {
            seed: 9,
            ..AlsConfig::default()
        };
        assert_eq!(fit_nncp_als(&data.observed, 2, &cfg).unwrap(), fit_nncp_als(&data.observed, 2, &cfg).unwrap());
    }
}
