//! Dense row-major matrices and a reverse-mode gradient tape.
//!
//! Every value on the tape is a 2-D [`Tensor`]; scalars are `1 x 1` and
//! vectors are single rows. The op set is closed (see [`Tape`]) and only
//! broadcasts a `1 x cols` bias across rows.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Manifest, ManifestEntry};
pub use gradcheck::{finite_diff_check, finite_diff_check_with};
pub use tape::{SeqLayout, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Checked constructor: rejects length mismatch and NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor {rows}x{cols} entry {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Skips the finiteness scan. Length is still asserted.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }

    /// Plain (untracked) product `self * other`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![T::zero(); self.rows * other.cols];
        kernels::gemm_nn(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut out,
        );
        Ok(Tensor::from_vec(self.rows, other.cols, out))
    }

    /// Plain (untracked) product `self * other^T`.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![T::zero(); self.rows * other.rows];
        kernels::gemm_nt(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            &other.data,
            &mut out,
        );
        Ok(Tensor::from_vec(self.rows, other.rows, out))
    }
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_constructor_rejects_nan_and_bad_length() {
        assert!(Tensor::<f64>::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f64>::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(2, 2, vec![1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 1.0);
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
        let xt = x.matmul_t(&Tensor::eye(4)).unwrap();
        assert_eq!(xt, x);
    }
}
