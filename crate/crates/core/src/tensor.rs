//! Dense row-major feature matrices (points x channels).

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

use crate::error::{shape, Result};

/// Element type of feature tensors. `f64` is used for gradient checks, `f32` for training.
pub trait Real: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "tensor data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Columns `[start, end)` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols);
        let mut out = Self::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frobenius inner product, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self * w` where `w` is a row-major `cols x out_cols` matrix.
    pub fn matmul(&self, w: &[T], out_cols: usize) -> Self {
        assert_eq!(w.len(), self.cols * out_cols);
        let mut out = Self::zeros(self.rows, out_cols);
        for r in 0..self.rows {
            let x = self.row(r);
            let y = &mut out.data[r * out_cols..(r + 1) * out_cols];
            for (k, &xk) in x.iter().enumerate() {
                if xk == T::zero() {
                    continue;
                }
                let wk = &w[k * out_cols..(k + 1) * out_cols];
                for (yj, &wj) in y.iter_mut().zip(wk) {
                    *yj += xk * wj;
                }
            }
        }
        out
    }

    /// `self * w^T` where `w` is a row-major `out_cols x cols` matrix.
    pub fn matmul_transposed(&self, w: &[T], out_cols: usize) -> Self {
        assert_eq!(w.len(), self.cols * out_cols);
        let mut out = Self::zeros(self.rows, out_cols);
        for r in 0..self.rows {
            let x = self.row(r);
            for j in 0..out_cols {
                let wj = &w[j * self.cols..(j + 1) * self.cols];
                let mut acc = T::zero();
                for (&a, &b) in x.iter().zip(wj) {
                    acc += a * b;
                }
                out.data[r * out_cols + j] = acc;
            }
        }
        out
    }

    /// Accumulates `self^T * other` (a `self.cols x other.cols` matrix) into `acc`.
    pub fn accumulate_transpose_product(&self, other: &Self, acc: &mut [T]) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(acc.len(), self.cols * other.cols);
        let oc = other.cols;
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == T::zero() {
                    continue;
                }
                let dst = &mut acc[i * oc..(i + 1) * oc];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let w = [1.0, 0.0, 2.0, 0.5, 1.0, -1.0];
        let y = x.matmul(&w, 3);
        assert_eq!(y.row(0), &[2.0, 2.0, 0.0]);
        assert_eq!(y.row(1), &[5.0, 4.0, 2.0]);
        // (x w) == x (w^T)^T
        let wt = [1.0, 0.5, 0.0, 1.0, 2.0, -1.0];
        assert_eq!(x.matmul_transposed(&wt, 3), y);
    }

    #[test]
    fn transpose_product_accumulates() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let mut acc = vec![1.0, 1.0];
        a.accumulate_transpose_product(&b, &mut acc);
        assert_eq!(acc, vec![-1.0, -1.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor2::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
