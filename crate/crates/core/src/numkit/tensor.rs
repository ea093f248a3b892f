//! Dense row-major 2-D tensor. Vectors are stored as `(len, 1)`.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A dense matrix of `f64` in row-major order.
///
/// Weight matrices, embedding tables and bias vectors all live in this type;
/// a bias of length `n` is an `n x 1` tensor so that the checkpoint container
/// can describe every parameter as `(name, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("tensor contains non-finite values".into()));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn col_vec(data: &[f64]) -> Self {
        Tensor2 {
            rows: data.len(),
            cols: 1,
            data: data.to_vec(),
        }
    }

    /// Gaussian-initialized tensor, `N(0, std^2)` per entry.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std.max(0.0)).expect("std must be finite");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (r, out) in y.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *out = acc;
        }
        y
    }

    /// `y = self^T * x`; used by backward passes.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            let row = self.row(r);
            for (out, w) in y.iter_mut().zip(row) {
                *out += xr * w;
            }
        }
        y
    }

    /// Dot product between row `r` and a vector of length `cols`.
    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let row = self.row(r);
        let mut acc = 0.0;
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_hand_example() {
        let w = Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(w.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
        assert_eq!(w.matvec_t(&[1.0, 1.0]), vec![4.0, 6.0]);
    }

    #[test]
    fn from_vec_rejects_bad_shape_and_nan() {
        assert!(Tensor2::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor2::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
    }
}
