//! Dense row-major matrices. Every activation in the model is a 2-D
//! `rows x cols` block: feature maps are flattened row-major into
//! `(h * w) x channels`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Result};
use crate::float::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid_arg!(
                "tensor {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<F>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: F) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// First element; convenient for `1 x 1` results.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(invalid_arg!("cannot reshape {} values into {}x{}", self.data.len(), rows, cols));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(invalid_arg!(
                "matmul {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        F::gemm(
            self.rows,
            self.cols,
            other.cols,
            F::one(),
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (other.cols as isize, 1),
            F::zero(),
            &mut out.data,
            (other.cols as isize, 1),
        );
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| G::lit(x.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), |m, x| if x > m { x } else { m })
    }
}
