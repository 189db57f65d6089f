//! Dense row-major matrices, the scalar abstraction and the seeded RNG.
//!
//! Everything is generic over [`Real`] so the same code paths run in `f32`
//! for training and in `f64` for finite-difference gradient checks.
//!
//! Layout is row-major: entry `(r, c)` lives at `data[r * cols + c]`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floating point scalar used throughout the library (`f32` or `f64`).
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Converts an `f64` literal, rounding to nearest for `f32`.
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. Vectors are stored as `1 x n` matrices.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix{}x{}{:?}", self.rows, self.cols, self.data)
    }
}

/// Tag for [`Matrix::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementOp<T> {
    Add,
    Sub,
    Hadamard,
    Scale(T),
    Clamp { lo: T, hi: T },
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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

    /// Builds a matrix from nested rows; panics on ragged input (test/literal helper).
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(v: Vec<T>) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v,
        }
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix<T> {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * b`.
    pub fn matmul(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != b.rows {
            return Err(Error::shape("matmul", self.shape(), b.shape()));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        let n = b.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &b.data[k * n..(k + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self * bᵀ`.
    pub fn matmul_t(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != b.cols {
            return Err(Error::shape("matmul_t", self.shape(), b.shape()));
        }
        self.matmul(&b.transpose())
    }

    /// `selfᵀ * b`.
    pub fn t_matmul(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != b.rows {
            return Err(Error::shape("t_matmul", self.shape(), b.shape()));
        }
        let mut out = Matrix::zeros(self.cols, b.cols);
        self.t_matmul_acc(b, &mut out);
        Ok(out)
    }

    /// `out += selfᵀ * b`; shapes are the caller's responsibility.
    pub(crate) fn t_matmul_acc(&self, b: &Matrix<T>, out: &mut Matrix<T>) {
        debug_assert_eq!(self.rows, b.rows);
        debug_assert_eq!(out.shape(), (self.cols, b.cols));
        let n = b.cols;
        for k in 0..self.rows {
            let b_row = &b.data[k * n..(k + 1) * n];
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
    }

    pub fn elementwise(&self, op: ElementOp<T>, other: Option<&Matrix<T>>) -> Result<Matrix<T>> {
        let binary = |f: fn(T, T) -> T| -> Result<Matrix<T>> {
            let b = other.ok_or_else(|| {
                Error::InvalidArgument(format!("{op:?} needs a second operand"))
            })?;
            if b.shape() != self.shape() {
                return Err(Error::shape("elementwise", self.shape(), b.shape()));
            }
            Ok(Matrix {
                rows: self.rows,
                cols: self.cols,
                data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            })
        };
        match op {
            ElementOp::Add => binary(|x, y| x + y),
            ElementOp::Sub => binary(|x, y| x - y),
            ElementOp::Hadamard => binary(|x, y| x * y),
            ElementOp::Scale(s) => Ok(self.map(|x| x * s)),
            ElementOp::Clamp { lo, hi } => Ok(self.map(|x| x.max(lo).min(hi))),
        }
    }

    pub fn add(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.elementwise(ElementOp::Add, Some(b))
    }

    pub fn sub(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.elementwise(ElementOp::Sub, Some(b))
    }

    pub fn hadamard(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.elementwise(ElementOp::Hadamard, Some(b))
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|x| x * s)
    }

    /// Clamps every entry into `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Matrix<T> {
        self.map(|x| x.max(lo).min(hi))
    }

    /// In-place `self += b`.
    pub fn add_assign(&mut self, b: &Matrix<T>) -> Result<()> {
        if b.shape() != self.shape() {
            return Err(Error::shape("add_assign", self.shape(), b.shape()));
        }
        for (x, &y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    /// Horizontal concatenation `[self | b]`.
    pub fn hcat(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != b.rows {
            return Err(Error::shape("hcat", self.shape(), b.shape()));
        }
        let cols = self.cols + b.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Matrix<T>, Matrix<T>) {
        assert!(at <= self.cols);
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Named substreams derived from one top-level seed.
///
/// Each substream is a separate ChaCha stream of the same key, so drawing
/// from one never perturbs another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Corpus = 1,
    Init = 2,
    Shuffle = 3,
    Dropout = 4,
    Subsample = 5,
    Projection = 6,
}

/// Deterministic random source: ChaCha8 keyed by a 64-bit seed.
///
/// ChaCha output is specified bit-for-bit, so identical seeds give identical
/// sequences on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn substream(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.inner)
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        xs.shuffle(&mut self.inner);
    }
}

/// Xavier/Glorot uniform initialisation: entries uniform in `±sqrt(6 / (rows + cols))`.
pub fn xavier_init<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<T> {
    assert!(rows >= 1 && cols >= 1, "xavier_init needs positive dims");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of(rng.uniform_range(-bound, bound)))
        .collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
        let data = (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect();
        Matrix::new(r, c, data).unwrap()
    }

    #[test]
    fn identity_times_a() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 3, 4);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn small_analytic_product() {
        let a = Matrix::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[1.0f32], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-6);
        assert!(a.matmul_t(&b.transpose()).unwrap().max_abs_diff(&got) < 1e-12);
        assert!(a.transpose().t_matmul(&b).unwrap().max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::<f32>::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 vs 2x3"), "{msg}");
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let a: Matrix<f32> = xavier_init(&mut Rng::new(1), 4, 4);
        let b: Matrix<f32> = xavier_init(&mut Rng::new(1), 4, 4);
        assert_eq!(a.data(), b.data());
        let bound = (6.0f32 / 8.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn xavier_sample_mean_near_zero() {
        let m: Matrix<f64> = xavier_init(&mut Rng::new(7), 1000, 100);
        let n = m.len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let bound = (6.0f64 / 1100.0).sqrt();
        // uniform(-b, b) has variance b²/3
        let sigma_mean = (bound * bound / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma_mean, "mean {mean} sigma {sigma_mean}");
    }

    #[test]
    fn elementwise_ops() {
        let a = Matrix::from_rows(&[&[1.0f32, -2.0], &[3.0, 0.5]]);
        assert_eq!(a.add(&Matrix::zeros(2, 2)).unwrap(), a);
        let h = Matrix::from_rows(&[&[2.0f32, 3.0]])
            .hadamard(&Matrix::from_rows(&[&[4.0, 5.0]]))
            .unwrap();
        assert_eq!(h, Matrix::from_rows(&[&[8.0, 15.0]]));
        let c = Matrix::from_rows(&[&[-1.0f64, 0.0, 1e-20, 3.0]]).elementwise(
            ElementOp::Clamp { lo: 1e-12, hi: f64::INFINITY },
            None,
        );
        assert!(c.unwrap().data().iter().all(|&x| x >= 1e-12));
        assert!(a.sub(&Matrix::zeros(1, 2)).is_err());
        assert!(a.elementwise(ElementOp::Hadamard, None).is_err());
    }

    #[test]
    fn rng_substreams_differ_and_repeat() {
        let mut a = Rng::substream(5, Stream::Init);
        let mut b = Rng::substream(5, Stream::Shuffle);
        let mut a2 = Rng::substream(5, Stream::Init);
        let xa: Vec<f64> = (0..4).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.uniform()).collect();
        let xa2: Vec<f64> = (0..4).map(|_| a2.uniform()).collect();
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a: Matrix<f32> = random(&mut rng, m, k).cast();
            let b: Matrix<f32> = random(&mut rng, k, n).cast();
            let c: Matrix<f32> = random(&mut rng, n, p).cast();
            let (a0, b0, c0) = (a.clone(), b.clone(), c.clone());
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().map(|x| x.abs()).fold(1.0f32, f32::max);
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-4);
            // inputs untouched
            prop_assert_eq!(a, a0);
            prop_assert_eq!(b, b0);
            prop_assert_eq!(c, c0);
        }
    }
}
