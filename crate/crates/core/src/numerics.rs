//! Dense row-major linear algebra: a small `Matrix` type, a jittered
//! Cholesky solver and a central-difference gradient checker.
//!
//! Everything here is `f64`. Matrix products go through `matrixmultiply`,
//! which is the only place an external kernel is used.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Result, TasmlError};

/// Largest diagonal shift the Cholesky solver will try before giving up.
pub const MAX_JITTER: f64 = 1e-3;
/// First shift tried when the caller asked for no jitter and factorization failed.
pub const MIN_ESCALATED_JITTER: f64 = 1e-10;
/// Step of the central differences in [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TasmlError::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TasmlError::dims("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_diag(&mut self, s: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += s;
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self[(r, c)] - self[(c, r)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// `A · B`
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, b.cols);
        gemm(1.0, self, false, b, false, 0.0, &mut out);
        out
    }

    /// `Aᵀ · B`
    pub fn t_matmul(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, b.cols);
        gemm(1.0, self, true, b, false, 0.0, &mut out);
        out
    }

    /// `A · Bᵀ`
    pub fn matmul_t(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, b.rows);
        gemm(1.0, self, false, b, true, 0.0, &mut out);
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `C ← alpha · op(A) · op(B) + beta · C`, where `op` optionally transposes.
///
/// Panics on inconsistent shapes; callers are internal and check shapes
/// before reaching here.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((m, n), c.shape(), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe exactly the owned buffers, whose
    // lengths equal rows * cols, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Lower-triangular `L` with `L·Lᵀ = A + jitter·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
    jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `a + jitter·I`, escalating the jitter ×10 from `base_jitter`
    /// until factorization succeeds or [`MAX_JITTER`] is exceeded.
    pub fn factorize(a: &Matrix, base_jitter: f64) -> Result<Self> {
        if a.rows != a.cols {
            return Err(TasmlError::dims("cholesky (square)", a.rows, a.cols));
        }
        if !a.is_symmetric(1e-10) {
            return Err(TasmlError::NotPositiveDefinite { max_jitter: 0.0 });
        }
        if !a.is_finite() {
            return Err(TasmlError::NonFiniteValue { context: "cholesky input" });
        }
        let mut jitter = base_jitter.max(0.0);
        loop {
            if let Some(l) = try_cholesky(a, jitter) {
                return Ok(CholeskyFactor { l, jitter });
            }
            jitter = if jitter == 0.0 {
                MIN_ESCALATED_JITTER
            } else {
                jitter * 10.0
            };
            if jitter > MAX_JITTER * (1.0 + 1e-12) {
                return Err(TasmlError::NotPositiveDefinite {
                    max_jitter: MAX_JITTER,
                });
            }
        }
    }

    /// Reassembles a factor from stored parts (checkpoint loading).
    pub fn from_parts(l: Matrix, jitter: f64) -> Result<Self> {
        if l.rows != l.cols {
            return Err(TasmlError::dims("cholesky factor (square)", l.rows, l.cols));
        }
        Ok(CholeskyFactor { l, jitter })
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// `L·Lᵀ`
    pub fn reconstruct(&self) -> Matrix {
        self.l.matmul_t(&self.l)
    }

    /// Solves `(A + jitter·I) X = B` column by column.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(TasmlError::dims("cholesky solve rhs rows", n, b.rows));
        }
        let mut x = b.clone();
        let k = b.cols;
        let l = &self.l;
        // forward: L y = b
        for i in 0..n {
            let li = l.row(i);
            for c in 0..k {
                let mut s = x[(i, c)];
                for j in 0..i {
                    s -= li[j] * x[(j, c)];
                }
                x[(i, c)] = s / li[i];
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for c in 0..k {
                let mut s = x[(i, c)];
                for j in (i + 1)..n {
                    s -= l[(j, i)] * x[(j, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve(&Matrix::column(b))?.into_vec())
    }
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            if i == j {
                s += jitter;
            }
            s -= dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                if s.is_nan() || s <= 0.0 || s.is_infinite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `(A + jitter·I) X = B` for symmetric positive-definite `A`,
/// returning the solution together with the factor actually used.
pub fn cholesky_solve(a: &Matrix, b: &Matrix, base_jitter: f64) -> Result<(Matrix, CholeskyFactor)> {
    if base_jitter < 0.0 || !base_jitter.is_finite() {
        return Err(TasmlError::config("base_jitter", "must be finite and >= 0"));
    }
    if b.rows != a.rows {
        return Err(TasmlError::dims("cholesky_solve rhs rows", a.rows, b.rows));
    }
    let factor = CholeskyFactor::factorize(a, base_jitter)?;
    let x = factor.solve(b)?;
    if !x.is_finite() {
        return Err(TasmlError::NonFiniteValue { context: "cholesky_solve" });
    }
    Ok((x, factor))
}

/// Compares `analytic_grad` to central finite differences of `f` at `point`
/// and returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &[f64], analytic_grad: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if point.len() != analytic_grad.len() {
        return Err(TasmlError::dims("grad_check", point.len(), analytic_grad.len()));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + GRAD_CHECK_STEP;
        let fp = f(&probe);
        probe[i] = orig - GRAD_CHECK_STEP;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TasmlError::NonFiniteValue { context: "grad_check probe" });
        }
        let numeric = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
        let err = (analytic_grad[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut g = Matrix::zeros(n, n);
        g.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut a = g.matmul_t(&g);
        a.add_diag(0.5);
        a
    }

    /// Gaussian elimination with partial pivoting, independent of Cholesky.
    fn gauss_solve(a: &Matrix, b: &Matrix) -> Matrix {
        let n = a.rows();
        let k = b.cols();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = a.row(r).to_vec();
                row.extend_from_slice(b.row(r));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = aug[r][col] / aug[col][col];
                    for c in col..n + k {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let mut x = Matrix::zeros(n, k);
        for r in 0..n {
            for c in 0..k {
                x[(r, c)] = aug[r][n + c] / aug[r][r];
            }
        }
        x
    }

    #[test]
    fn identity_solve() {
        let i3 = Matrix::identity(3);
        let (x, f) = cholesky_solve(&i3, &i3, 0.0).unwrap();
        assert_eq!(x, i3);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn diagonal_solve() {
        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let b = Matrix::column(&[1.0, 1.0]);
        let (x, _) = cholesky_solve(&a, &b, 0.0).unwrap();
        assert!(x.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn random_spd_matches_gaussian_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(8, &mut rng);
        let mut b = Matrix::zeros(8, 3);
        b.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let (x, f) = cholesky_solve(&a, &b, 0.0).unwrap();
        assert_eq!(f.jitter(), 0.0);
        assert!(a.matmul(&x).max_abs_diff(&b) < 1e-8);
        assert!(x.max_abs_diff(&gauss_solve(&a, &b)) < 1e-8);
        let recon = f.reconstruct();
        assert!(recon.max_abs_diff(&a) <= 1e-8 * a.max_abs());
    }

    #[test]
    fn solving_against_itself_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 4, 12] {
            let a = random_spd(n, &mut rng);
            let (x, _) = cholesky_solve(&a, &a, 0.0).unwrap();
            assert!(x.max_abs_diff(&Matrix::identity(n)) < 1e-8);
        }
    }

    #[test]
    fn singular_matrix_escalates_jitter() {
        let ones = Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let f = CholeskyFactor::factorize(&ones, 0.0).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= MAX_JITTER);
    }

    #[test]
    fn indefinite_matrix_fails_at_cap() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
        let err = cholesky_solve(&a, &Matrix::column(&[1.0, 1.0]), 0.0).unwrap_err();
        assert!(matches!(err, TasmlError::NotPositiveDefinite { .. }));
    }

    #[test]
    fn mismatched_rhs_is_rejected() {
        let err = cholesky_solve(&Matrix::identity(3), &Matrix::zeros(2, 1), 0.0).unwrap_err();
        assert!(matches!(err, TasmlError::DimensionMismatch { .. }));
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        let quad = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        assert!(grad_check(quad, &[1.0, 2.0], &[2.0, 4.0]).unwrap() < 1e-8);
        let lin = |x: &[f64]| x.iter().sum::<f64>();
        assert!(grad_check(lin, &[0.3, -1.0, 5.0], &[1.0, 1.0, 1.0]).unwrap() < 1e-10);
    }

    #[test]
    fn grad_check_flags_wrong_gradient_and_nan() {
        let quad = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        assert!(grad_check(quad, &[1.0, 2.0], &[2.0, 5.0]).unwrap() > 0.1);
        let bad = |_: &[f64]| f64::NAN;
        assert!(matches!(
            grad_check(bad, &[1.0], &[0.0]),
            Err(TasmlError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn gemm_transposes_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Matrix::zeros(4, 3);
        let mut b = Matrix::zeros(4, 5);
        a.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        b.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let via_t = a.transpose().matmul(&b);
        assert!(a.t_matmul(&b).max_abs_diff(&via_t) < 1e-14);
        let via_t2 = b.transpose().matmul(&b);
        assert!(b.t_matmul(&b).max_abs_diff(&via_t2) < 1e-14);
        assert!(a.transpose().matmul_t(&a.transpose()).max_abs_diff(&a.t_matmul(&a)) < 1e-14);
    }
}
