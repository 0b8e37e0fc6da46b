//! Small dense linear algebra over a generic [`Scalar`].
//!
//! Matrices are row-major and owned. Everything here is sized for estimation
//! windows (tens to a few hundred unknowns), so factorizations are plain
//! dense loops with an optional band limit.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>12.6?} ", self.data[i * self.cols + j])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
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
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds from a row-major slice. Panics if `data.len() != rows * cols`.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[T]) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Self {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    /// Builds from nested rows; `None` if the rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = rhs.row(k);
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d = *d + a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn tr_mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "tr_mul_vec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    /// `self += s * rhs`.
    pub fn add_scaled_assign(&mut self, s: T, rhs: &Self) {
        assert_eq!(self.shape(), rhs.shape(), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + s * b;
        }
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    /// Induced infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> T {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|a| a.abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) * T::lit(0.5)
        })
    }

    /// `xᵀ self x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        dot(x, &self.mul_vec(x))
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    /// Adds `block` into `self` at `(r0, c0)`.
    pub fn add_block(&mut self, r0: usize, c0: usize, block: &Self) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = self[(r0 + i, c0 + j)] + block[(i, j)];
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| U::lit(a.to_f64_lossy())).collect(),
        }
    }

    /// Dense Cholesky `self = L Lᵀ`; `None` unless symmetric positive definite
    /// to working precision.
    pub fn cholesky(&self) -> Option<Cholesky<T>> {
        self.cholesky_banded(self.rows)
    }

    /// Cholesky restricted to a half-bandwidth: entries with `|i - j| > bw`
    /// are assumed zero and the factor keeps the same band.
    pub fn cholesky_banded(&self, bw: usize) -> Option<Cholesky<T>> {
        if !self.is_square() {
            return None;
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut diag = self[(j, j)];
            for k in lo..j {
                diag = diag - l[(j, k)] * l[(j, k)];
            }
            if !(diag > T::zero()) || !diag.is_finite() {
                return None;
            }
            let d = diag.sqrt();
            l[(j, j)] = d;
            let hi = (j + bw + 1).min(n);
            for i in (j + 1)..hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self[(i, j)];
                for k in lo_i..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(Cholesky { l, bw })
    }

    /// Eigenvalues of a symmetric matrix, ascending (cyclic Jacobi).
    pub fn symmetric_eigenvalues(&self) -> Vec<T> {
        assert!(self.is_square(), "eigenvalues need a square matrix");
        let n = self.rows;
        let mut a = self.symmetrized();
        let tiny = T::epsilon() * T::epsilon();
        for _sweep in 0..100 {
            let off: T = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            let scale: T = a.data.iter().map(|&v| v * v).sum();
            if off <= tiny * scale || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    pub fn min_eigenvalue(&self) -> T {
        self.symmetric_eigenvalues().first().copied().unwrap_or(T::zero())
    }

    pub fn max_eigenvalue(&self) -> T {
        self.symmetric_eigenvalues().last().copied().unwrap_or(T::zero())
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> T {
        self.transpose().matmul(self).max_eigenvalue().max(T::zero()).sqrt()
    }

    /// Spectral radius from Gelfand's formula, `lim ‖A^(2^m)‖^(2^-m)`,
    /// evaluated with renormalized repeated squaring.
    pub fn spectral_radius(&self) -> T {
        assert!(self.is_square(), "spectral radius needs a square matrix");
        let norm = self.frobenius();
        if norm == T::zero() {
            return T::zero();
        }
        let mut b = self.scale(T::one() / norm);
        let mut log_scale = norm.ln();
        let mut weight = T::one();
        for _ in 0..60 {
            b = b.matmul(&b);
            weight = weight * T::lit(0.5);
            let nb = b.frobenius();
            if nb == T::zero() {
                return T::zero();
            }
            log_scale = log_scale + weight * nb.ln();
            b = b.scale(T::one() / nb);
        }
        log_scale.exp()
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
    bw: usize,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(self.bw);
            let mut s = x[i];
            for k in lo..i {
                s = s - self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let hi = (i + self.bw + 1).min(n);
            let mut s = x[i];
            for k in (i + 1)..hi {
                s = s - self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// `(L Lᵀ)⁻¹ b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrized()
    }
}

/// Householder QR of a tall (or square) matrix, reflectors kept implicit.
#[derive(Debug, Clone)]
pub struct HouseholderQr<T> {
    // Reflector vectors below and on the diagonal, R strictly above it.
    qr: Matrix<T>,
    rdiag: Vec<T>,
    betas: Vec<T>,
}

impl<T: Scalar> HouseholderQr<T> {
    pub fn new(a: &Matrix<T>) -> Self {
        let (m, n) = a.shape();
        assert!(m >= n, "QR needs rows >= cols");
        let mut qr = a.clone();
        let mut betas = vec![T::zero(); n];
        let mut rdiag = vec![T::zero(); n];
        for k in 0..n {
            let norm = (k..m).map(|i| qr[(i, k)] * qr[(i, k)]).sum::<T>().sqrt();
            if norm == T::zero() {
                continue;
            }
            let alpha = if qr[(k, k)] > T::zero() { -norm } else { norm };
            qr[(k, k)] = qr[(k, k)] - alpha;
            let vnorm_sq = (k..m).map(|i| qr[(i, k)] * qr[(i, k)]).sum::<T>();
            let beta = T::lit(2.0) / vnorm_sq;
            for j in (k + 1)..n {
                let s: T = (k..m).map(|i| qr[(i, k)] * qr[(i, j)]).sum();
                for i in k..m {
                    qr[(i, j)] = qr[(i, j)] - beta * s * qr[(i, k)];
                }
            }
            betas[k] = beta;
            rdiag[k] = alpha;
        }
        Self { qr, rdiag, betas }
    }

    fn reflect(&self, k: usize, v: &mut [T]) {
        let m = self.qr.rows;
        let beta = self.betas[k];
        if beta == T::zero() {
            return;
        }
        let s: T = (k..m).map(|i| self.qr[(i, k)] * v[i]).sum();
        for i in k..m {
            v[i] = v[i] - beta * s * self.qr[(i, k)];
        }
    }

    /// `Qᵀ v`.
    pub fn qt_mul(&self, v: &[T]) -> Vec<T> {
        let mut out = v.to_vec();
        for k in 0..self.qr.cols {
            self.reflect(k, &mut out);
        }
        out
    }

    /// `Q v`.
    pub fn q_mul(&self, v: &[T]) -> Vec<T> {
        let mut out = v.to_vec();
        for k in (0..self.qr.cols).rev() {
            self.reflect(k, &mut out);
        }
        out
    }

    /// Smallest `|R_kk|`, a cheap rank indicator.
    pub fn min_abs_rdiag(&self) -> T {
        self.rdiag.iter().fold(T::infinity(), |m, &d| m.min(d.abs()))
    }

    /// Solves `R x = b` using the leading `cols` entries of `b`.
    pub fn solve_r(&self, b: &[T]) -> Vec<T> {
        let n = self.qr.cols;
        let mut x = b[..n].to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s = s - self.qr[(i, j)] * x[j];
            }
            x[i] = s / self.rdiag[i];
        }
        x
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

pub fn norm_inf<T: Scalar>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn scaled<T: Scalar>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|&x| x * s).collect()
}

/// `y += s * x`.
pub fn axpy<T: Scalar>(s: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + s * xi;
    }
}

/// Outer product `a bᵀ`.
pub fn outer<T: Scalar>(a: &[T], b: &[T]) -> Matrix<T> {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}
