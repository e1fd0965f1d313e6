//! Dense row-major matrices and the handful of kernels the engine needs.
//!
//! Every kernel that does arithmetic takes an [`OpCounter`] so the cost of the
//! relevance head can be checked against its closed-form FLOP count. A matrix
//! product of an `a x b` by a `b x c` matrix is charged `2abc` multiply-adds;
//! elementwise kernels are charged one operation per entry.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. Serving uses `f32`; gradient checking uses `f64`.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type Matrix64 = Matrix<f64>;

/// `n x h` token embeddings, one row per token.
pub type EmbeddingMatrix = Matrix<f32>;

impl<T: Scalar> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                left: (rows.len(), cols),
                right: (1, bad.len()),
            });
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Uncounted product, for gradient code where costs are not tracked.
    pub fn dot(&self, other: &Self) -> Result<Self> {
        matmul(self, other, &mut OpCounter::default())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
        Ok(())
    }
}

/// Counts arithmetic performed by the kernels in this module.
///
/// Counts only grow while a counter is in use; [`OpCounter::take`] reads and
/// clears it at a scope boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mul_adds: u64,
    pub elementwise: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.mul_adds + self.elementwise
    }

    pub fn take(&mut self) -> OpCounter {
        std::mem::take(self)
    }

    pub fn merge(&mut self, other: OpCounter) {
        self.mul_adds += other.mul_adds;
        self.elementwise += other.elementwise;
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, counter: &mut OpCounter) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if k > 0 && n > 0 {
        for (a_row, out_row) in a.data.chunks_exact(k).zip(out.data.chunks_exact_mut(n)) {
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    counter.mul_adds += 2 * (m as u64) * (k as u64) * (n as u64);
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "matmul" });
    }
    Ok(out)
}

/// `aᵀ·b` without materializing the transpose. Uncounted.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (k, n) = (a.cols, b.cols);
    let mut out = Matrix::zeros(k, n);
    for (a_row, b_row) in a.iter_rows().zip(b.iter_rows()) {
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out.row_mut(p).iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a·bᵀ` without materializing the transpose. Uncounted.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for (i, a_row) in a.iter_rows().enumerate() {
        for (j, b_row) in b.iter_rows().enumerate() {
            out.data[i * b.rows + j] = dot(a_row, b_row);
        }
    }
    Ok(out)
}

/// Entrywise sum, charged one elementwise operation per entry.
pub fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, counter: &mut OpCounter) -> Result<Matrix<T>> {
    let mut out = a.clone();
    out.add_scaled(b, T::one())?;
    counter.elementwise += out.data.len() as u64;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "add" });
    }
    Ok(out)
}

/// Returns the row-normalized matrix together with the original row norms.
pub fn l2_normalize_rows_with_norms<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm == T::zero() || !norm.is_finite() {
            return Err(Error::DegenerateRow { row: i });
        }
        for v in row.iter_mut() {
            *v = *v / norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

pub fn l2_normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    l2_normalize_rows_with_norms(m).map(|(out, _)| out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn elementwise<T: Scalar>(kind: Activation, m: &Matrix<T>, counter: &mut OpCounter) -> Matrix<T> {
    let f: fn(T) -> T = match kind {
        Activation::Sigmoid => sigmoid,
        Activation::Relu => |x: T| x.max(T::zero()),
    };
    counter.elementwise += m.data.len() as u64;
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&x| f(x)).collect(),
    }
}

/// Temperature-scaled softmax and log-softmax of `v`, stabilized by shifting
/// by the maximum.
pub fn softmax_and_log_softmax<T: Scalar>(v: &[T], temperature: T) -> Result<(Vec<T>, Vec<T>)> {
    if temperature.is_nan() || temperature <= T::zero() || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature:?}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    if v.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let scaled: Vec<T> = v.iter().map(|&x| x / temperature).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = scaled.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    let log_probs: Vec<T> = scaled.iter().map(|&x| x - log_z).collect();
    let probs = log_probs.iter().map(|&l| l.exp()).collect();
    Ok((probs, log_probs))
}
