//! Dense numerics substrate: row-major matrices, vectors, reductions and a
//! seeded random generator.
//!
//! Reductions always accumulate left to right in `f64`, so results are
//! bit-reproducible for equal inputs.

use std::ops::{Deref, Index, IndexMut};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec64(Vec<f64>);

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        check_finite(&data, "Mat::from_vec")?;
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    /// Builds a matrix whose column `j` is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Mat::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::LengthMismatch {
                    left: c.len(),
                    right: rows,
                });
            }
            for (i, v) in c.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        check_finite(&m.data, "Mat::from_columns")?;
        Ok(m)
    }

    /// Entries drawn i.i.d. from N(0, std²), filled in row-major order.
    pub fn randn(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Mat { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec64 {
        Vec64((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    fn same_shape(&self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Column sums, accumulated left to right within each row.
    pub fn col_sum(&self) -> Result<Vec64> {
        if self.cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        Ok(Vec64(
            (0..self.rows)
                .map(|i| self.row(i).iter().fold(0.0, |acc, v| acc + v))
                .collect(),
        ))
    }

    /// Mean of the columns: entry `i` is `(1/cols) * sum_j m[i, j]`.
    pub fn col_mean(&self) -> Result<Vec64> {
        let n = self.cols as f64;
        let sum = self.col_sum()?;
        Ok(Vec64(sum.0.into_iter().map(|v| v / n).collect()))
    }

    /// `self + alpha * x`.
    pub fn axpy(&self, alpha: f64, x: &Mat) -> Result<Mat> {
        self.same_shape(x)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&x.data)
            .map(|(y, x)| y + alpha * x)
            .collect();
        check_finite(&data, "axpy")?;
        Ok(Mat { data, ..*self })
    }

    /// In-place `self += alpha * x`.
    pub fn axpy_assign(&mut self, alpha: f64, x: &Mat) -> Result<()> {
        self.same_shape(x)?;
        for (y, x) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * x;
        }
        check_finite(&self.data, "axpy_assign")
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.same_shape(other)?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        check_finite(&data, "add")?;
        Ok(Mat { data, ..*self })
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.same_shape(other)?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        check_finite(&data, "sub")?;
        Ok(Mat { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> Result<Mat> {
        let data: Vec<f64> = self.data.iter().map(|v| v * s).collect();
        check_finite(&data, "scale")?;
        Ok(Mat { data, ..*self })
    }

    /// Column `j` multiplied by `s[j]`.
    pub fn scale_cols(&self, s: &Vec64) -> Result<Mat> {
        if s.len() != self.cols {
            return Err(Error::LengthMismatch {
                left: s.len(),
                right: self.cols,
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v * s[k % self.cols])
            .collect();
        check_finite(&data, "scale_cols")?;
        Ok(Mat { data, ..*self })
    }

    /// `self * v` for a length-`cols` vector.
    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec64> {
        if v.len() != self.cols {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: self.cols,
            });
        }
        Ok(Vec64(
            (0..self.rows)
                .map(|i| {
                    self.row(i)
                        .iter()
                        .zip(v)
                        .fold(0.0, |acc, (a, b)| acc + a * b)
                })
                .collect(),
        ))
    }

    /// `selfᵀ * v` for a length-`rows` vector.
    pub fn mat_t_vec(&self, v: &[f64]) -> Result<Vec64> {
        if v.len() != self.rows {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: self.rows,
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(Vec64(out))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

impl Vec64 {
    pub fn zeros(len: usize) -> Self {
        Vec64(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Vec64(vec![1.0; len])
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Vec64(vec![v; len])
    }

    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data, "Vec64::new")?;
        Ok(Vec64(data))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot_slices(&self.0, &self.0).sqrt()
    }

    /// In-place `self += alpha * x`.
    pub fn axpy_assign(&mut self, alpha: f64, x: &Vec64) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: self.len(),
            });
        }
        for (y, x) in self.0.iter_mut().zip(&x.0) {
            *y += alpha * x;
        }
        check_finite(&self.0, "Vec64::axpy_assign")
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for Vec64 {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vec64 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vec64::new(data)
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Inner product accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_slices(a, b))
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total = exps.iter().fold(0.0, |acc, e| acc + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index. `None` when empty.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Seeded generator: ChaCha8 keyed by `seed_from_u64(seed)`.
///
/// Uniform doubles use the top 53 bits of one `u64` draw. Normals use
/// Box–Muller on a pair `(u1, u2)` drawn in that order, with
/// `r = sqrt(-2 ln(1 - u1))`; the cosine branch `r cos(2π u2)` is returned
/// first and the sine branch is cached for the next call.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle, last position first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
