//! Row-major dense matrices and per-head column views.
//!
//! Token matrices (hidden states, Q, K, V) are stored `n × model_dim`. A head
//! is a contiguous column band `[h * head_dim, (h + 1) * head_dim)` and is
//! accessed through [`HeadView`] without copying.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage width of a floating-point element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementWidth {
    F32,
    F64,
}

impl ElementWidth {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementWidth::F32 => "f32",
            ElementWidth::F64 => "f64",
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            ElementWidth::F32 => 4,
            ElementWidth::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(ElementWidth::F32),
            "f64" => Some(ElementWidth::F64),
            _ => None,
        }
    }
}

/// Scalar type usable in every kernel of this crate.
pub trait Element: Float + Sum + Default + Debug + Send + Sync + 'static {
    const WIDTH: ElementWidth;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes one element from exactly `WIDTH.bytes()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const WIDTH: ElementWidth = ElementWidth::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const WIDTH: ElementWidth = ElementWidth::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Row-major `rows × cols` matrix with finite elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    /// Builds a matrix, rejecting length mismatches and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix element by element.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `self · rhs` with a straightforward i-k-j loop.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::config(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Matrix<U> {
        self.map(|x| U::from_f64(x.as_f64()))
    }

    /// Largest absolute elementwise difference, or `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    /// A view over every column.
    pub fn view(&self) -> HeadView<'_, T> {
        HeadView {
            matrix: self,
            offset: 0,
            width: self.cols,
        }
    }

    /// Column band for head `h` of width `head_dim`.
    pub fn head(&self, h: usize, head_dim: usize) -> Result<HeadView<'_, T>> {
        if head_dim == 0 || (h + 1) * head_dim > self.cols {
            return Err(Error::config(format!(
                "head {h} with dim {head_dim} exceeds {} columns",
                self.cols
            )));
        }
        Ok(HeadView {
            matrix: self,
            offset: h * head_dim,
            width: head_dim,
        })
    }
}

/// Borrowed column band of a token matrix. Rows are token positions.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a, T = f32> {
    matrix: &'a Matrix<T>,
    offset: usize,
    width: usize,
}

impl<'a, T: Element> HeadView<'a, T> {
    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn dim(&self) -> usize {
        self.width
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        let start = r * self.matrix.cols + self.offset;
        &self.matrix.data[start..start + self.width]
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.rows() * self.width);
        for r in 0..self.rows() {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: self.rows(),
            cols: self.width,
            data,
        }
    }
}

impl<'a, T: Element> From<&'a Matrix<T>> for HeadView<'a, T> {
    fn from(m: &'a Matrix<T>) -> Self {
        m.view()
    }
}

/// Multi-head layout of the model dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub n_heads: usize,
    pub head_dim: usize,
}

impl HeadGeometry {
    pub fn new(n_heads: usize, head_dim: usize) -> Result<Self> {
        if n_heads == 0 || head_dim == 0 {
            return Err(Error::config("n_heads and head_dim must be positive"));
        }
        Ok(Self { n_heads, head_dim })
    }

    /// Splits `model_dim` evenly across `n_heads`.
    pub fn from_model_dim(model_dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || model_dim == 0 || model_dim % n_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {model_dim} is not divisible by {n_heads} heads"
            )));
        }
        Self::new(n_heads, model_dim / n_heads)
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
