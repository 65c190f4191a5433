//! Shared initialization helpers for the factorization engines.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::reconstruct;

/// A fixed starting point for one mode, used by the consensus refit.
#[derive(Debug, Clone, PartialEq)]
pub struct InitGuess {
    pub mode: usize,
    pub matrix: Array2<f64>,
    /// Keep the mode fixed during optimization instead of only starting there.
    pub freeze: bool,
}

impl InitGuess {
    pub fn new(mode: usize, matrix: Array2<f64>) -> Self {
        InitGuess {
            mode,
            matrix,
            freeze: false,
        }
    }

    pub(crate) fn validate(&self, shape: &[usize], rank: usize) -> Result<()> {
        if self.mode >= shape.len() {
            return Err(Error::invalid(format!(
                "init mode {} out of range for order {}",
                self.mode,
                shape.len()
            )));
        }
        if self.matrix.dim() != (shape[self.mode], rank) {
            return Err(Error::invalid(format!(
                "init matrix is {:?}, mode {} needs ({}, {rank})",
                self.matrix.dim(),
                self.mode,
                shape[self.mode]
            )));
        }
        if self.matrix.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("init matrix must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Rescales `factors` so the mean of their CP reconstruction equals
/// `target_mean`. The correction is split evenly over the modes that are
/// not `frozen`.
pub(crate) fn match_mean(factors: &mut [Array2<f64>], shape: &[usize], target_mean: f64, frozen: Option<usize>) {
    let recon = reconstruct(factors, shape);
    let current = recon.iter().sum::<f64>() / recon.len() as f64;
    if !(current > 0.0) || !(target_mean > 0.0) {
        return;
    }
    let free = factors.len() - usize::from(frozen.is_some());
    if free == 0 {
        return;
    }
    let s = (target_mean / current).powf(1.0 / free as f64);
    for (k, f) in factors.iter_mut().enumerate() {
        if Some(k) != frozen {
            f.mapv_inplace(|v| v * s);
        }
    }
}
