//! Dense row-major `f64` tensors.
//!
//! Every op on the autodiff tape works on rank-2 tensors `[rows, cols]`; a
//! scalar is `[1, 1]`. Higher ranks can be stored and reshaped but are not
//! operated on directly.

use serde::{Deserialize, Serialize};

use crate::error::{BracError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(BracError::Config(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a `[rows, cols]` tensor, panicking if the buffer length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor buffer length mismatch");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(BracError::Config("ragged rows".into()));
        }
        Ok(Self::from_vec(
            rows.len(),
            cols,
            rows.iter().flatten().copied().collect(),
        ))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(BracError::Config(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Rows `idx` gathered into a new `[idx.len(), cols]` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), c, data)
    }

    /// `[rows, a + b]` from `[rows, a]` and `[rows, b]`.
    pub fn concat_cols(&self, other: &Tensor) -> Self {
        assert_eq!(self.rows(), other.rows(), "concat_cols row mismatch");
        let (r, a, b) = (self.rows(), self.cols(), other.cols());
        let mut data = Vec::with_capacity(r * (a + b));
        for i in 0..r {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Self::from_vec(r, a + b, data)
    }

    /// Each row repeated `n` times consecutively.
    pub fn repeat_rows(&self, n: usize) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.rows() * n * c);
        for i in 0..self.rows() {
            for _ in 0..n {
                data.extend_from_slice(self.row(i));
            }
        }
        Self::from_vec(self.rows() * n, c, data)
    }
}

/// `out = a @ b` (or `a @ bᵀ` when `b_transposed`), accumulated into `out`
/// scaled by `beta`.
pub(crate) fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    a_transposed: bool,
    b: &[f64],
    b_shape: (usize, usize),
    b_transposed: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (m, k) = if a_transposed {
        (a_shape.1, a_shape.0)
    } else {
        a_shape
    };
    let (kb, n) = if b_transposed {
        (b_shape.1, b_shape.0)
    } else {
        b_shape
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|o| *o *= beta);
        return;
    }
    // Row/column strides for the (possibly transposed) logical views.
    let (rsa, csa) = if a_transposed {
        (1, a_shape.1 as isize)
    } else {
        (a_shape.1 as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, b_shape.1 as isize)
    } else {
        (b_shape.1 as isize, 1)
    };
    // SAFETY: the asserted dimensions bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a @ b` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.rows() * b.cols()];
    gemm(
        a.data(),
        (a.rows(), a.cols()),
        false,
        b.data(),
        (b.rows(), b.cols()),
        false,
        &mut out,
        0.0,
    );
    Tensor::from_vec(a.rows(), b.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_gemm() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // aᵀ a
        let mut out = vec![0.0; 9];
        gemm(a.data(), (2, 3), true, a.data(), (2, 3), false, &mut out, 0.0);
        assert_eq!(out, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        // a aᵀ
        let mut out = vec![0.0; 4];
        gemm(a.data(), (2, 3), false, a.data(), (2, 3), true, &mut out, 0.0);
        assert_eq!(out, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn repeat_and_select_rows() {
        let a = Tensor::from_vec(2, 1, vec![1.0, 2.0]);
        assert_eq!(a.repeat_rows(2).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(a.select_rows(&[1, 1, 0]).data(), &[2.0, 2.0, 1.0]);
    }
}
