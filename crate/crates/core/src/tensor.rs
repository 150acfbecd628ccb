//! Dense row-major `f64` tensors.
//!
//! Every value flowing through the tape is one of these. Shapes are explicit,
//! entries are kept finite, and all arithmetic is plain scalar code: at the
//! scale this crate targets, gradient-check fidelity matters far more than
//! throughput.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `data` fills `shape` exactly and that
    /// every entry is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("tensor entries must be finite".to_string()));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs whose invariants are established
    /// by the caller. Finiteness is deliberately not asserted here: training
    /// loops watch their scalar losses and report divergence as an error
    /// instead of aborting mid-op.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::raw(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds exactly one entry (shape `[1]` or `[]`).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::raw(self.shape.clone(), data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Index of the largest entry in each row, ties broken toward the lowest
    /// class index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (n, k) = (self.rows(), self.cols());
        (0..n)
            .map(|i| {
                let row = &self.data[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Stacks two 2-D tensors with equal column counts, `a`'s rows first.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "concat_rows requires equal widths");
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::raw(vec![a.rows() + b.rows(), a.cols()], data)
}

/// `a[m×k] · b[k×n]`, allocated fresh.
pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::raw(vec![m, n], out)
}

/// `aᵀ[k×m] · b[k×n]` without materializing the transpose.
pub(crate) fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a.data[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::raw(vec![m, n], out)
}

/// `a[m×k] · bᵀ[n×k]` without materializing the transpose.
pub(crate) fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::raw(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn from_vec_rejects_zero_dim() {
        assert!(Tensor::from_vec(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_vec(vec![2, 3], vec![0.5, 0.5, 0.1, 0.2, 0.9, 0.9]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn matmul_raw_matches_hand_result() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul_raw(&a, &b);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }
}
