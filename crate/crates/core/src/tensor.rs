//! Dense N-way tensors, CP factor models and the multilinear kernels the
//! factorization engines share.
//!
//! Storage is row-major with the last index fastest. Every kernel in this
//! module walks the tensor as a sequence of contiguous fibers along the last
//! mode, carrying the running Hadamard product of the factor rows of the
//! leading modes; that keeps the inner loop a dense `R`-wide dot product.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::invalid(format!(
                "tensor order must be at least 2, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "entry {pos} is {} (values must be finite and non-negative)",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index. Panics when out of bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index order mismatch");
        let mut off = 0;
        for (d, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < n, "index {i} out of bounds for mode {d} (extent {n})");
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn zero_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 0.0).count() as f64 / self.data.len() as f64
    }

    /// True when every entry is a non-negative integer.
    pub fn is_count(&self) -> bool {
        self.data.iter().all(|v| v.fract() == 0.0)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

/// Rank-`R` CP model: one non-negative `I_k x R` factor matrix per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    factors: Vec<Array2<f64>>,
}

impl FactorModel {
    pub fn new(factors: Vec<Array2<f64>>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(Error::InvalidModel(format!(
                "a CP model needs at least 2 modes, got {}",
                factors.len()
            )));
        }
        let rank = factors[0].ncols();
        if rank == 0 {
            return Err(Error::InvalidModel("rank must be at least 1".into()));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.ncols() != rank {
                return Err(Error::InvalidModel(format!(
                    "mode {k} has {} columns, mode 0 has {rank}",
                    f.ncols()
                )));
            }
            if f.nrows() == 0 {
                return Err(Error::InvalidModel(format!("mode {k} has no rows")));
            }
            if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "mode {k} has negative or non-finite entries"
                )));
            }
        }
        Ok(FactorModel { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn factors(&self) -> &[Array2<f64>] {
        &self.factors
    }

    pub fn factor(&self, mode: usize) -> &Array2<f64> {
        &self.factors[mode]
    }

    pub fn into_factors(self) -> Vec<Array2<f64>> {
        self.factors
    }

    /// Reorders components: new column `c` is old column `perm[c]`, in every mode.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{r}")));
        }
        let factors = self
            .factors
            .iter()
            .map(|f| Array2::from_shape_fn(f.raw_dim(), |(i, c)| f[[i, perm[c]]]))
            .collect();
        Ok(FactorModel { factors })
    }
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cp_reconstruct(m: &FactorModel) -> Tensor {
    let shape = m.shape();
    let data = reconstruct(&m.factors, &shape);
    Tensor { shape, data }
}

/// Column-wise Kronecker product of `matrices`, optionally leaving one out.
///
/// Row ordering follows the inputs: the first matrix varies slowest, so row
/// `i * J + j` of `A ⊙ B` is the Hadamard product of `A[i]` and `B[j]`.
pub fn khatri_rao(matrices: &[ArrayView2<f64>], skip_mode: Option<usize>) -> Result<Array2<f64>> {
    let kept: Vec<&ArrayView2<f64>> = matrices
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != skip_mode)
        .map(|(_, m)| m)
        .collect();
    let first = kept
        .first()
        .ok_or_else(|| Error::invalid("khatri_rao needs at least one matrix"))?;
    let r = first.ncols();
    if let Some(bad) = kept.iter().find(|m| m.ncols() != r) {
        return Err(Error::invalid(format!(
            "column count mismatch: {} vs {r}",
            bad.ncols()
        )));
    }
    let mut out: Array2<f64> = (*first).to_owned();
    for m in &kept[1..] {
        let rows = out.nrows() * m.nrows();
        let mut next = Array2::zeros((rows, r));
        for i in 0..out.nrows() {
            for j in 0..m.nrows() {
                let row = i * m.nrows() + j;
                for c in 0..r {
                    next[[row, c]] = out[[i, c]] * m[[j, c]];
                }
            }
        }
        out = next;
    }
    Ok(out)
}

/// Mode-`mode` matricization: rows index `mode`, columns enumerate the
/// remaining modes in increasing order with the last one fastest.
pub fn unfold(t: &Tensor, mode: usize) -> Result<Array2<f64>> {
    let n = t.order();
    if mode >= n {
        return Err(Error::invalid(format!("mode {mode} out of range for order {n}")));
    }
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    let mut out = Array2::zeros((rows, cols));
    for_each_index(&t.shape, |off, idx| {
        let mut col = 0;
        for k in (0..n).filter(|&k| k != mode) {
            col = col * t.shape[k] + idx[k];
        }
        out[[idx[mode], col]] = t.data[off];
    });
    Ok(out)
}

/// Inverse of [`unfold`].
pub fn refold(m: &Array2<f64>, shape: &[usize], mode: usize) -> Result<Tensor> {
    let n = shape.len();
    if mode >= n {
        return Err(Error::invalid(format!("mode {mode} out of range for order {n}")));
    }
    let total: usize = shape.iter().product();
    if m.nrows() != shape[mode] || m.nrows() * m.ncols() != total {
        return Err(Error::invalid(format!(
            "matrix {:?} does not refold into {shape:?} along mode {mode}",
            m.dim()
        )));
    }
    let mut data = vec![0.0; total];
    for_each_index(shape, |off, idx| {
        let mut col = 0;
        for k in (0..n).filter(|&k| k != mode) {
            col = col * shape[k] + idx[k];
        }
        data[off] = m[[idx[mode], col]];
    });
    Tensor::new(shape.to_vec(), data)
}

/// Calls `f(flat_offset, multi_index)` for every entry in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for off in 0..total {
        f(off, &idx);
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Walks the fibers along the last mode. For each prefix `(i_0, .., i_{N-2})`
/// the callback receives the prefix, the Hadamard product of the prefix
/// factor rows (length `R`) and the flat offset of the fiber's first entry.
pub(crate) fn for_each_fiber(
    factors: &[Array2<f64>],
    shape: &[usize],
    mut f: impl FnMut(&[usize], &[f64], usize),
) {
    let n = shape.len();
    let r = factors[0].ncols();
    let lead = n - 1;
    let fiber_len = shape[lead];
    let n_fibers: usize = shape[..lead].iter().product();
    let mut idx = vec![0usize; lead];
    // prods[d] = Hadamard product of rows idx[0..=d]
    let mut prods = vec![vec![0.0; r]; lead];
    let mut dirty = 0usize;
    for fiber in 0..n_fibers {
        for d in dirty..lead {
            let row = factors[d].row(idx[d]);
            if d == 0 {
                for c in 0..r {
                    prods[0][c] = row[c];
                }
            } else {
                let (done, rest) = prods.split_at_mut(d);
                let prev = &done[d - 1];
                for c in 0..r {
                    rest[0][c] = prev[c] * row[c];
                }
            }
        }
        f(&idx, &prods[lead - 1], fiber * fiber_len);
        dirty = lead;
        for k in (0..lead).rev() {
            idx[k] += 1;
            dirty = k;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Dense CP reconstruction from raw factor matrices.
pub(crate) fn reconstruct(factors: &[Array2<f64>], shape: &[usize]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    reconstruct_into(factors, shape, &mut out);
    out
}

pub(crate) fn reconstruct_into(factors: &[Array2<f64>], shape: &[usize], out: &mut [f64]) {
    let last = &factors[shape.len() - 1];
    let r = last.ncols();
    let last = last.as_slice().expect("factor matrices are standard layout");
    let fiber_len = shape[shape.len() - 1];
    for_each_fiber(factors, shape, |_, prod, off| {
        for l in 0..fiber_len {
            let row = &last[l * r..(l + 1) * r];
            let mut acc = 0.0;
            for c in 0..r {
                acc += prod[c] * row[c];
            }
            out[off + l] = acc;
        }
    });
}

/// Matricized-tensor-times-Khatri-Rao product for one mode:
/// `out[j, r] = Σ_{I: i_mode = j} W_I Π_{s≠mode} A_s[i_s, r]`.
pub(crate) fn mttkrp(weights: &[f64], factors: &[Array2<f64>], shape: &[usize], mode: usize) -> Array2<f64> {
    let n = shape.len();
    let r = factors[0].ncols();
    let lead = n - 1;
    let fiber_len = shape[lead];
    let last = factors[lead].as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((shape[mode], r));
    {
        let out_s = out.as_slice_mut().expect("standard layout");
        if mode == lead {
            for_each_fiber(factors, shape, |_, prod, off| {
                for l in 0..fiber_len {
                    let w = weights[off + l];
                    if w != 0.0 {
                        let dst = &mut out_s[l * r..(l + 1) * r];
                        for c in 0..r {
                            dst[c] += w * prod[c];
                        }
                    }
                }
            });
        } else {
            let mut acc = vec![0.0; r];
            for_each_fiber(factors, shape, |idx, _, off| {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for l in 0..fiber_len {
                    let w = weights[off + l];
                    if w != 0.0 {
                        let row = &last[l * r..(l + 1) * r];
                        for c in 0..r {
                            acc[c] += w * row[c];
                        }
                    }
                }
                let dst = &mut out_s[idx[mode] * r..(idx[mode] + 1) * r];
                for c in 0..r {
                    let mut p = acc[c];
                    for (s, &i) in idx.iter().enumerate() {
                        if s != mode {
                            p *= factors[s][[i, c]];
                        }
                    }
                    dst[c] += p;
                }
            });
        }
    }
    out
}

/// Single-pass MTTKRP for every mode, with weights computed on the fly from
/// the reconstruction: `weight(offset, λ_I)` is called once per entry in
/// row-major order and its return value is used as `W_I`.
pub(crate) fn mttkrp_all_with(
    factors: &[Array2<f64>],
    shape: &[usize],
    mut weight: impl FnMut(usize, f64) -> f64,
) -> Vec<Array2<f64>> {
    let n = shape.len();
    let r = factors[0].ncols();
    let lead = n - 1;
    let fiber_len = shape[lead];
    let last = factors[lead].as_slice().expect("standard layout");
    let mut outs: Vec<Array2<f64>> = shape.iter().map(|&d| Array2::zeros((d, r))).collect();
    let mut acc = vec![0.0; r];
    let mut loo = vec![0.0; r];
    {
        let (lead_outs, last_out) = outs.split_at_mut(lead);
        let last_out = last_out[0].as_slice_mut().expect("standard layout");
        for_each_fiber(factors, shape, |idx, prod, off| {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for l in 0..fiber_len {
                let row = &last[l * r..(l + 1) * r];
                let mut lambda = 0.0;
                for c in 0..r {
                    lambda += prod[c] * row[c];
                }
                let w = weight(off + l, lambda);
                if w != 0.0 {
                    let dst = &mut last_out[l * r..(l + 1) * r];
                    for c in 0..r {
                        acc[c] += w * row[c];
                        dst[c] += w * prod[c];
                    }
                }
            }
            for k in 0..lead {
                loo.copy_from_slice(&acc);
                for (s, &i) in idx.iter().enumerate() {
                    if s != k {
                        let row = factors[s].row(i);
                        for c in 0..r {
                            loo[c] *= row[c];
                        }
                    }
                }
                let mut dst = lead_outs[k].row_mut(idx[k]);
                for c in 0..r {
                    dst[c] += loo[c];
                }
            }
        });
    }
    outs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn model(factors: Vec<Array2<f64>>) -> FactorModel {
        FactorModel::new(factors).unwrap()
    }

    // brute force over all indices and components
    fn reconstruct_oracle(m: &FactorModel) -> Vec<f64> {
        let shape = m.shape();
        let mut out = Vec::new();
        for_each_index(&shape, |_, idx| {
            let mut s = 0.0;
            for r in 0..m.rank() {
                let mut p = 1.0;
                for (k, &i) in idx.iter().enumerate() {
                    p *= m.factor(k)[[i, r]];
                }
                s += p;
            }
            out.push(s);
        });
        out
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Tensor::zeros(vec![2, 2, 2]).unwrap()), 0.0);
        assert_eq!(frobenius_norm(&Tensor::new(vec![1, 1], vec![5.0]).unwrap()), 5.0);
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((frobenius_norm(&t) - 30f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reconstruct_examples() {
        let m = model(vec![Array2::ones((2, 1)), Array2::ones((3, 1)), Array2::ones((4, 1))]);
        let t = cp_reconstruct(&m);
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert!(t.data().iter().all(|&v| v == 1.0));

        let m = model(vec![array![[2.0]], array![[3.0]], array![[4.0]]]);
        assert_eq!(cp_reconstruct(&m).data(), &[24.0]);

        let eye = Array2::eye(2);
        let m = model(vec![eye.clone(), eye.clone(), eye]);
        let t = cp_reconstruct(&m);
        assert_eq!(t.data(), reconstruct_oracle(&m).as_slice());
        assert_eq!(t.get(&[0, 0, 0]), 1.0);
        assert_eq!(t.get(&[1, 1, 1]), 1.0);
        assert_eq!(t.sum(), 2.0);
    }

    #[test]
    fn rank_mismatch_rejected() {
        let err = FactorModel::new(vec![Array2::ones((2, 2)), Array2::ones((2, 3))]);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn khatri_rao_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(khatri_rao(&[a.view()], None).unwrap(), a);

        let ones = Array2::<f64>::ones((2, 1));
        let kr = khatri_rao(&[ones.view(), ones.view()], None).unwrap();
        assert_eq!(kr, Array2::<f64>::ones((4, 1)));

        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 4.0], [5.0, 6.0]];
        assert_eq!(khatri_rao(&[a.view(), b.view()], None).unwrap(), array![[3.0, 8.0], [5.0, 12.0]]);

        let c = array![[1.0]];
        assert!(khatri_rao(&[a.view(), c.view()], None).is_err());
        // skipping the mismatched matrix is fine
        assert!(khatri_rao(&[a.view(), c.view(), b.view()], Some(1)).is_ok());
    }

    #[test]
    fn unfold_index_map() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        // explicit enumeration: value at (i, j, k) is 4i + 2j + k
        let expected = [
            array![[0.0, 1.0, 2.0, 3.0], [4.0, 5.0, 6.0, 7.0]],
            array![[0.0, 1.0, 4.0, 5.0], [2.0, 3.0, 6.0, 7.0]],
            array![[0.0, 2.0, 4.0, 6.0], [1.0, 3.0, 5.0, 7.0]],
        ];
        for (mode, e) in expected.iter().enumerate() {
            let u = unfold(&t, mode).unwrap();
            assert_eq!(&u, e, "mode {mode}");
            assert_eq!(refold(&u, t.shape(), mode).unwrap(), t);
        }
        assert!(unfold(&t, 3).is_err());
    }

    #[test]
    fn unfold_trivial_cases() {
        let m = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let u = unfold(&m, 0).unwrap();
        assert_eq!(u, array![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]);
        let one = Tensor::new(vec![1, 1, 1], vec![7.0]).unwrap();
        assert_eq!(unfold(&one, 2).unwrap(), array![[7.0]]);
    }

    #[test]
    fn mttkrp_matches_unfold_times_khatri_rao() {
        let f = vec![
            array![[1.0, 0.5], [2.0, 1.5]],
            array![[0.3, 1.0], [1.0, 2.0], [0.1, 0.2]],
            array![[1.0, 2.0], [3.0, 0.5], [0.7, 0.1], [2.0, 2.0]],
        ];
        let shape = [2, 3, 4];
        let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let t = Tensor::new(shape.to_vec(), w.clone()).unwrap();
        let views: Vec<_> = f.iter().map(|m| m.view()).collect();
        let all = mttkrp_all_with(&f, &shape, |off, _| w[off]);
        for mode in 0..3 {
            let kr = khatri_rao(&views, Some(mode)).unwrap();
            let expected = unfold(&t, mode).unwrap().dot(&kr);
            let got = mttkrp(&w, &f, &shape, mode);
            for (a, b) in expected.iter().zip(got.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in expected.iter().zip(all[mode].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_columns_rejects_non_permutations() {
        let m = model(vec![Array2::ones((2, 2)), Array2::ones((2, 2))]);
        assert!(m.permute_columns(&[0, 0]).is_err());
        assert!(m.permute_columns(&[1, 0]).is_ok());
    }
}
