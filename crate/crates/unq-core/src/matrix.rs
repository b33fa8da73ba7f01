//! Row-major dense matrices and the scalar abstraction used by all numeric code.
//!
//! Production paths run at `f32`; the gradient checker instantiates the same
//! code at `f64` so finite differences are not drowned by rounding error.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type for dense numerics. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Default + Debug + Send + Sync + 'static
{
    fn from_f64(value: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(value: f64) -> Self {
        value as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(value: f64) -> Self {
        value
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. Rows are contiguous, so per-row slices are free.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "DenseMatrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    /// `self * rhs` with `self` as `rows x k` and `rhs` as `k x cols`.
    pub fn matmul(&self, rhs: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "DenseMatrix::matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}", rhs.rows),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = out.row_mut(r);
            for (k, &x) in lhs_row.iter().enumerate() {
                if x == T::zero() {
                    continue;
                }
                let rhs_row = rhs.row(k);
                for (o, &w) in out_row.iter_mut().zip(rhs_row) {
                    *o += x * w;
                }
            }
        }
        Ok(out)
    }

    /// New matrix whose rows are `self.row(i)` for each index, in order.
    pub fn gather_rows(&self, indices: &[u32]) -> Result<DenseMatrix<T>> {
        let mut out = DenseMatrix::zeros(indices.len(), self.cols);
        for (r, &i) in indices.iter().enumerate() {
            let i = i as usize;
            if i >= self.rows {
                return Err(Error::shape(
                    "DenseMatrix::gather_rows",
                    format!("row index < {}", self.rows),
                    format!("{i}"),
                ));
            }
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> DenseMatrix<T> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(DenseMatrix::from_vec(2, 3, vec![0.0f32; 5]).is_err());
        assert!(DenseMatrix::from_vec(2, 3, vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        // [[1,2],[3,4],[5,6]] * [[7,8,9],[10,11,12]]
        let a = DenseMatrix::from_vec(3, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 3, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        let expected = [27.0, 30.0, 33.0, 61.0, 68.0, 75.0, 95.0, 106.0, 117.0];
        assert_eq!(c.shape(), (3, 3));
        for (got, want) in c.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dim() {
        let a = DenseMatrix::<f32>::zeros(2, 3);
        let b = DenseMatrix::<f32>::zeros(4, 2);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn gather_rows_picks_and_validates() {
        let m = DenseMatrix::from_vec(3, 2, vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = m.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(m.gather_rows(&[3]).is_err());
    }

    #[test]
    fn squared_distance_matches_manual_sum() {
        let a = [1.0f64, -2.0, 0.5];
        let b = [0.0f64, 1.0, 0.5];
        assert!((squared_distance(&a, &b) - 10.0).abs() < 1e-12);
    }
}
