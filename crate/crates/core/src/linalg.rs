//! Dense row-major linear algebra for the Laplace machinery: Cholesky
//! factorization, triangular solves and symmetric inversion.
//!
//! Everything here is a pure function of its inputs. Failure to factor is
//! reported as [`LinalgError::NotPositiveDefinite`] with the offending pivot so
//! callers can decide whether to retry with diagonal jitter
//! (see [`cholesky_jittered`]).

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::scalar::{axpy, dot, Real};

/// Relative asymmetry tolerated by [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Jitter ladder, relative to the mean diagonal.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

const ROW_BLOCK: usize = 48;
const RHS_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; test helper.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != T::zero() {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    /// Adds `eps` to every diagonal entry.
    pub fn add_diagonal(&mut self, eps: T) {
        for i in 0..self.rows.min(self.cols) {
            let k = i * self.cols + i;
            self.data[k] += eps;
        }
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry magnitude.
    pub fn relative_asymmetry(&self) -> T {
        let scale = self.max_abs();
        if scale == T::zero() {
            return T::zero();
        }
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Copies the lower triangle into the upper one.
    pub fn symmetrize_from_lower(&mut self) {
        for i in 0..self.rows {
            for j in 0..i {
                let v = self.data[i * self.cols + j];
                self.data[j * self.cols + i] = v;
            }
        }
    }

    pub fn mean_diagonal(&self) -> T {
        let n = self.rows.min(self.cols);
        if n == 0 {
            return T::zero();
        }
        self.diagonal().into_iter().sum::<T>() / T::from_usize_lossy(n)
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor<T> {
    lower: DenseMatrix<T>,
}

impl<T: Real> CholeskyFactor<T> {
    /// Wraps an existing lower-triangular matrix, checking the diagonal.
    pub fn from_lower(lower: DenseMatrix<T>) -> Result<Self> {
        if !lower.is_square() {
            return Err(LinalgError::NotSquare { rows: lower.rows(), cols: lower.cols() });
        }
        for i in 0..lower.rows() {
            if lower[(i, i)] <= T::zero() {
                return Err(LinalgError::NotPositiveDefinite { pivot: i });
            }
        }
        Ok(Self { lower })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &DenseMatrix<T> {
        &self.lower
    }

    /// Solves `L X = B` in place (`B` is `dim x k`).
    pub fn forward_substitute(&self, b: &mut DenseMatrix<T>) -> Result<()> {
        let n = self.dim();
        if b.rows() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.rows() });
        }
        let k = b.cols();
        if k <= RHS_CHUNK {
            forward_rows(&self.lower, &mut b.data, k);
            return Ok(());
        }
        let mut buf = Vec::with_capacity(n * RHS_CHUNK);
        let mut c0 = 0;
        while c0 < k {
            let kc = RHS_CHUNK.min(k - c0);
            buf.clear();
            for i in 0..n {
                buf.extend_from_slice(&b.data[i * k + c0..i * k + c0 + kc]);
            }
            forward_rows(&self.lower, &mut buf, kc);
            for i in 0..n {
                b.data[i * k + c0..i * k + c0 + kc].copy_from_slice(&buf[i * kc..(i + 1) * kc]);
            }
            c0 += kc;
        }
        Ok(())
    }

    /// Solves `Lᵀ X = B` in place.
    pub fn backward_substitute(&self, b: &mut DenseMatrix<T>) -> Result<()> {
        let n = self.dim();
        if b.rows() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.rows() });
        }
        let k = b.cols();
        for i in (0..n).rev() {
            let inv = T::one() / self.lower[(i, i)];
            let (head, tail) = b.data.split_at_mut(i * k);
            let xi = &mut tail[..k];
            for v in xi.iter_mut() {
                *v *= inv;
            }
            let lrow = &self.lower.row(i)[..i];
            for (r, &l) in lrow.iter().enumerate() {
                if l != T::zero() {
                    axpy(-l, xi, &mut head[r * k..(r + 1) * k]);
                }
            }
        }
        Ok(())
    }

    /// `L⁻¹` as a dense lower-triangular matrix.
    pub fn lower_inverse(&self) -> DenseMatrix<T> {
        let mut inv = DenseMatrix::identity(self.dim());
        self.forward_substitute(&mut inv).expect("square identity");
        inv
    }

    /// `diag(A⁻¹)` without forming the full inverse.
    pub fn inverse_diagonal(&self) -> Vec<T> {
        let n = self.dim();
        let linv = self.lower_inverse();
        let mut diag = vec![T::zero(); n];
        for k in 0..n {
            for (d, &v) in diag.iter_mut().zip(&linv.row(k)[..=k]) {
                *d += v * v;
            }
        }
        diag
    }

    /// Full `A⁻¹ = L⁻ᵀ L⁻¹`, exactly symmetric.
    pub fn inverse(&self) -> DenseMatrix<T> {
        let n = self.dim();
        // rows of (L⁻¹)ᵀ: entry (i, k) nonzero for k >= i
        let upper = self.lower_inverse().transpose();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&upper.row(i)[i..], &upper.row(j)[i..]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// `log det A`
    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.dim()).map(|i| two * self.lower[(i, i)].ln()).sum()
    }
}

fn forward_rows<T: Real>(lower: &DenseMatrix<T>, b: &mut [T], k: usize) {
    let n = lower.rows();
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i * k);
        let xi = &mut rest[..k];
        let lrow = lower.row(i);
        for (j, &l) in lrow[..i].iter().enumerate() {
            if l != T::zero() {
                axpy(-l, &done[j * k..(j + 1) * k], xi);
            }
        }
        let inv = T::one() / lrow[i];
        for v in xi.iter_mut() {
            *v *= inv;
        }
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read once symmetry has been checked.
pub fn cholesky<T: Real>(a: &DenseMatrix<T>) -> Result<CholeskyFactor<T>> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let asym = a.relative_asymmetry();
    if asym > T::lit(SYMMETRY_TOL) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym.as_f64() });
    }
    factor_lower(a).map(|lower| CholeskyFactor { lower })
}

/// Row-blocked left-looking factorization: each finished row `j` is streamed
/// once per block of rows that depends on it.
fn factor_lower<T: Real>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    let mut b0 = 0;
    while b0 < n {
        let b1 = (b0 + ROW_BLOCK).min(n);
        for j in 0..b1 {
            let (before, from_b0) = l.data.split_at_mut(b0 * n);
            let row_j: Vec<T>;
            let lj: &[T] = if j < b0 {
                &before[j * n..j * n + j]
            } else {
                row_j = from_b0[(j - b0) * n..(j - b0) * n + j].to_vec();
                &row_j
            };
            let mut ljj = if j < b0 { before[j * n + j] } else { T::zero() };
            for i in j.max(b0)..b1 {
                let li = &mut from_b0[(i - b0) * n..(i - b0 + 1) * n];
                let s = a.data[i * n + j] - dot(&li[..j], lj);
                if i == j {
                    if !(s > T::zero()) || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { pivot: j });
                    }
                    ljj = s.sqrt();
                    li[j] = ljj;
                } else {
                    li[j] = s / ljj;
                }
            }
        }
        b0 = b1;
    }
    Ok(l)
}

/// Cholesky with the jitter ladder: retries `A + ε·mean(diag A)·I` for
/// `ε` in [`JITTER_LADDER`]. Returns the factor and the absolute jitter used.
pub fn cholesky_jittered<T: Real>(a: &DenseMatrix<T>) -> Result<(CholeskyFactor<T>, T)> {
    match cholesky(a) {
        Ok(f) => return Ok((f, T::zero())),
        Err(LinalgError::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let scale = a.mean_diagonal().abs().max(T::min_positive_value());
    let mut last = LinalgError::NotPositiveDefinite { pivot: 0 };
    for eps in JITTER_LADDER {
        let jitter = T::lit(eps) * scale;
        let mut shifted = a.clone();
        shifted.add_diagonal(jitter);
        match cholesky(&shifted) {
            Ok(f) => return Ok((f, jitter)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Solves `(L Lᵀ) X = B`.
pub fn chol_solve<T: Real>(f: &CholeskyFactor<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if f.dim() != b.rows() {
        return Err(LinalgError::DimensionMismatch { expected: f.dim(), got: b.rows() });
    }
    let mut x = b.clone();
    f.forward_substitute(&mut x)?;
    f.backward_substitute(&mut x)?;
    Ok(x)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn sym_inverse<T: Real>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    Ok(cholesky(a)?.inverse())
}
