//! Minimal masked-sequence numerics.
//!
//! Everything here is a pure function of its inputs. Positions whose mask
//! entry is `false` never influence an output statistic.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Zero-row matrices are allowed; they show up as the edge gates of a
/// single-frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                left: rows * cols,
                right: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    ///
    /// # Panics
    ///
    /// Panics if rows have different lengths.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "Matrix::zip_map",
                left: self.data.len(),
                right: other.data.len(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.cols,
                right: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_bt",
                left: self.cols,
                right: other.cols,
            });
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`.
    pub fn matmul_at(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul_at",
                left: self.rows,
                right: other.rows,
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "slice_cols out of range");
        Self::from_fn(self.rows, len, |i, j| self[(i, start + j)])
    }

    /// Rows `0..n` as a new matrix.
    pub fn head_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows, "head_rows out of range");
        Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, Matrix::rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::DimensionMismatch {
                op: "concat_cols",
                left: rows,
                right: bad.rows,
            });
        }
        let cols = parts.iter().map(Matrix::cols).sum();
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                out.row_mut(i)[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(libm::fabs(x)))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max(libm::fabs(a - b)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense boolean matrix, used for the `allow` mask of a score matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllowMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl AllowMask {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// `allow(i, j) = q_mask(i) ∧ k_mask(j)`.
    pub fn outer(q_mask: &[bool], k_mask: &[bool]) -> Self {
        Self::from_fn(q_mask.len(), k_mask.len(), |i, j| q_mask[i] && k_mask[j])
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
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Elementwise conjunction.
    pub fn and(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::DimensionMismatch {
                op: "AllowMask::and",
                left: self.data.len(),
                right: other.data.len(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn head_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows);
        Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }
}

/// A length-`L`, width-`D` sequence with a per-position validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSeq {
    values: Matrix,
    mask: Vec<bool>,
}

impl MaskedSeq {
    pub fn new(values: Matrix, mask: Vec<bool>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Shape("masked sequence needs L >= 1 and D >= 1"));
        }
        if mask.len() != values.rows() {
            return Err(Error::DimensionMismatch {
                op: "MaskedSeq::new",
                left: values.rows(),
                right: mask.len(),
            });
        }
        for (i, &m) in mask.iter().enumerate() {
            if m && values.row(i).iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("non-finite value at a valid position"));
            }
        }
        Ok(Self { values, mask })
    }

    /// A sequence whose positions are all valid.
    pub fn full(values: Matrix) -> Result<Self> {
        let mask = vec![true; values.rows()];
        Self::new(values, mask)
    }

    /// A sequence whose first `valid` positions are valid.
    pub fn with_prefix(values: Matrix, valid: usize) -> Result<Self> {
        let mask = (0..values.rows()).map(|i| i < valid).collect();
        Self::new(values, mask)
    }

    #[inline]
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The first `n` positions, with their mask.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::OutOfRange("prefix length"));
        }
        Ok(Self {
            values: self.values.head_rows(n),
            mask: self.mask[..n].to_vec(),
        })
    }

    pub fn into_parts(self) -> (Matrix, Vec<bool>) {
        (self.values, self.mask)
    }
}

/// Raw attention logits plus the mask of pairs that may receive weight.
///
/// Logits at disallowed pairs are conceptually `-inf`; their stored values
/// are never read.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub logits: Matrix,
    pub allow: AllowMask,
}

impl ScoreMatrix {
    pub fn new(logits: Matrix, allow: AllowMask) -> Result<Self> {
        if (logits.rows(), logits.cols()) != (allow.rows(), allow.cols()) {
            return Err(Error::DimensionMismatch {
                op: "ScoreMatrix::new",
                left: logits.rows() * logits.cols(),
                right: allow.rows() * allow.cols(),
            });
        }
        Ok(Self { logits, allow })
    }
}

/// Row-stochastic weights plus a flag for rows with no allowed entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxOutput {
    pub weights: Matrix,
    /// `true` where the row had no allowed entry; such rows are all zero.
    pub empty_rows: Vec<bool>,
}

/// Per-channel mean and population variance over valid positions.
pub fn masked_mean_var(x: &MaskedSeq) -> Result<(Vec<f64>, Vec<f64>)> {
    let count = x.valid_len();
    if count == 0 {
        return Err(Error::EmptySequence);
    }
    let d = x.width();
    let n = count as f64;
    let mut mean = vec![0.0; d];
    for (i, _) in x.mask.iter().enumerate().filter(|(_, &m)| m) {
        for (m, &v) in mean.iter_mut().zip(x.values.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for (i, _) in x.mask.iter().enumerate().filter(|(_, &m)| m) {
        for ((s, &v), &m) in var.iter_mut().zip(x.values.row(i)).zip(&mean) {
            let c = v - m;
            *s += c * c;
        }
    }
    for s in &mut var {
        *s /= n;
    }
    Ok((mean, var))
}

/// Row-wise softmax over allowed entries, with per-row max subtraction.
pub fn masked_softmax(s: &ScoreMatrix) -> SoftmaxOutput {
    let (rows, cols) = s.logits.shape();
    let mut weights = Matrix::zeros(rows, cols);
    let mut empty_rows = vec![false; rows];
    for i in 0..rows {
        let allow = s.allow.row(i);
        let logits = s.logits.row(i);
        let max = logits
            .iter()
            .zip(allow)
            .filter(|(_, &a)| a)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            empty_rows[i] = true;
            continue;
        }
        let out = weights.row_mut(i);
        let mut total = 0.0;
        for ((o, &l), &a) in out.iter_mut().zip(logits).zip(allow) {
            if a {
                *o = libm::exp(l - max);
                total += *o;
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    SoftmaxOutput {
        weights,
        empty_rows,
    }
}

/// Left-zero-padded cumulative sum: `out[0] = 0`, `out[i] = Σ_{r<i} g[r]`.
pub fn cumsum_leftpad(g: &Matrix) -> Matrix {
    let d = g.cols();
    let mut out = Matrix::zeros(g.rows() + 1, d);
    for i in 0..g.rows() {
        for k in 0..d {
            out[(i + 1, k)] = out[(i, k)] + g[(i, k)];
        }
    }
    out
}

/// `‖a_i − b_j‖²` through norms and a Gram product, clamped at zero.
pub fn pairwise_sqdist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            op: "pairwise_sqdist",
            left: a.cols(),
            right: b.cols(),
        });
    }
    let a_norms: Vec<f64> = (0..a.rows()).map(|i| dot(a.row(i), a.row(i))).collect();
    let b_norms: Vec<f64> = (0..b.rows()).map(|j| dot(b.row(j), b.row(j))).collect();
    let mut gram = a.matmul_bt(b)?;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let d2 = a_norms[i] + b_norms[j] - 2.0 * gram[(i, j)];
            gram[(i, j)] = if d2 > 0.0 { d2 } else { 0.0 };
        }
    }
    Ok(gram)
}
