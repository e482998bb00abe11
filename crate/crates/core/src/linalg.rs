//! Dense real linear algebra on row-major `f64` storage.
//!
//! Problem sizes here top out around 64x64 (real-valued channels for up to
//! 32 antennas), so everything is dense and allocation-light rather than
//! clever. The SPD path goes through Cholesky; `solve_lu` is an independent
//! Gaussian-elimination route kept for cross-checking, and `jacobi_eigen`
//! provides the full symmetric eigendecomposition used by the spectral
//! filter reference and the rank checks.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric positive definite (pivot {pivot:.3e} at index {index})")]
    NotSpd { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("power iteration did not converge in {max_iter} iterations (best estimate {best:.6e})")]
    PowerIterationDiverged { max_iter: usize, best: f64 },
    #[error("singular matrix in LU solve (pivot {pivot:.3e} at column {col})")]
    Singular { col: usize, pivot: f64 },
}

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Column vector from a slice.
    pub fn col_vec(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector from a slice.
    pub fn row_vec(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions must match");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow.iter()) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, k: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * k).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Gram matrix Aᵀ·A.
    pub fn gram(&self) -> Matrix {
        self.transpose().matmul(self)
    }
}

pub fn vec_norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

const SYMMETRY_REL_TOL: f64 = 1e-10;

fn check_symmetric(a: &Matrix) -> Result<(), LinalgError> {
    let scale = a.max_abs().max(1e-300);
    let mut worst = 0.0_f64;
    for r in 0..a.rows() {
        for c in (r + 1)..a.cols() {
            worst = worst.max((a.get(r, c) - a.get(c, r)).abs());
        }
    }
    if worst > SYMMETRY_REL_TOL * scale {
        return Err(LinalgError::NotSymmetric { asymmetry: worst / scale });
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factor A = L·Lᵀ. Fails with `NotSpd` when a pivot is not strictly
    /// positive, which the EP layer treats as "precision state went invalid".
    pub fn factor(a: &Matrix) -> Result<Self, LinalgError> {
        if a.rows() != a.cols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "cholesky needs a square matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        check_symmetric(a)?;
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotSpd { index: j, pivot: d });
            }
            let dj = d.sqrt();
            l.set(j, j, dj);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / dj);
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solve A·X = B for a full right-hand-side matrix.
    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim(), "rhs row count must equal matrix dimension");
        let n = self.dim();
        let m = b.cols();
        let mut x = b.clone();
        // forward: L·Y = B
        for col in 0..m {
            for i in 0..n {
                let mut s = x.get(i, col);
                for k in 0..i {
                    s -= self.l.get(i, k) * x.get(k, col);
                }
                x.set(i, col, s / self.l.get(i, i));
            }
        }
        // backward: Lᵀ·X = Y
        for col in 0..m {
            for i in (0..n).rev() {
                let mut s = x.get(i, col);
                for k in (i + 1)..n {
                    s -= self.l.get(k, i) * x.get(k, col);
                }
                x.set(i, col, s / self.l.get(i, i));
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let x = self.solve_mat(&Matrix::col_vec(b));
        x.data().to_vec()
    }

    /// Full inverse via solving against the identity.
    pub fn inverse(&self) -> Matrix {
        self.solve_mat(&Matrix::identity(self.dim()))
    }
}

/// Solve A·X = B for symmetric positive definite A via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    Ok(Cholesky::factor(a)?.solve_mat(b))
}

/// Full inverse of an SPD matrix.
pub fn inverse_spd(a: &Matrix) -> Result<Matrix, LinalgError> {
    Ok(Cholesky::factor(a)?.inverse())
}

pub const POWER_ITER_TOL: f64 = 1e-8;
pub const POWER_ITER_MAX: usize = 1000;

/// Largest eigenvalue of a symmetric matrix by power iteration.
///
/// The start vector is all-ones plus a fixed index-dependent perturbation so
/// that it is never exactly orthogonal to the dominant eigenvector.
pub fn lambda_max(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "lambda_max needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    check_symmetric(a)?;
    let n = a.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 1e-6 * (i as f64 + 1.0)).collect();
    let norm = vec_norm2(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0_f64;
    for _ in 0..max_iter {
        let av = a.matvec(&v);
        let next = v.iter().zip(&av).map(|(x, y)| x * y).sum::<f64>();
        let norm = vec_norm2(&av);
        if norm == 0.0 {
            // Only possible when v is in the null space; the start vector makes
            // this mean A itself is (numerically) zero on the whole space.
            return Ok(0.0);
        }
        v = av.iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(LinalgError::PowerIterationDiverged { max_iter, best: lambda })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, U)` with columns of `U` the corresponding
/// orthonormal eigenvectors, eigenvalues ascending. Intended for the small
/// matrices this crate works with; used by the spectral-filter reference
/// route and by rank checks.
pub fn jacobi_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "jacobi_eigen needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    // symmetrize exactly so the sweep preserves symmetry bit-for-bit
    for r in 0..n {
        for c in (r + 1)..n {
            let avg = 0.5 * (m.get(r, c) + m.get(c, r));
            m.set(r, c, avg);
            m.set(c, r, avg);
        }
    }
    let mut u = Matrix::identity(n);
    let scale = m.max_abs().max(1e-300);
    let tol = 1e-14 * scale;
    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let ukp = u.get(k, p);
                    let ukq = u.get(k, q);
                    u.set(k, p, c * ukp - s * ukq);
                    u.set(k, q, s * ukp + c * ukq);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m.get(i, i), i)).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let eigenvalues: Vec<f64> = pairs.iter().map(|(v, _)| *v).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, (_, old_col)) in pairs.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, u.get(r, *old_col));
        }
    }
    Ok((eigenvalues, vectors))
}

/// Smallest singular value of a (tall) matrix, via the eigenvalues of AᵀA.
pub fn smallest_singular_value(a: &Matrix) -> Result<f64, LinalgError> {
    let (vals, _) = jacobi_eigen(&a.gram())?;
    Ok(vals[0].max(0.0).sqrt())
}

/// Gaussian elimination with partial pivoting. Independent of the Cholesky
/// path; kept as the reference route for cross-checking SPD solves.
pub fn solve_lu(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve_lu needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != a.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs rows {} != matrix dimension {}",
            b.rows(),
            a.rows()
        )));
    }
    let n = a.rows();
    let m = b.cols();
    let mut aug = Matrix::zeros(n, n + m);
    for r in 0..n {
        for c in 0..n {
            aug.set(r, c, a.get(r, c));
        }
        for c in 0..m {
            aug.set(r, n + c, b.get(r, c));
        }
    }
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot = aug.get(col, col).abs();
        for r in (col + 1)..n {
            let v = aug.get(r, col).abs();
            if v > pivot {
                pivot = v;
                pivot_row = r;
            }
        }
        if pivot <= 1e-300 {
            return Err(LinalgError::Singular { col, pivot });
        }
        if pivot_row != col {
            for c in 0..(n + m) {
                let tmp = aug.get(col, c);
                aug.set(col, c, aug.get(pivot_row, c));
                aug.set(pivot_row, c, tmp);
            }
        }
        let d = aug.get(col, col);
        for r in (col + 1)..n {
            let f = aug.get(r, col) / d;
            if f == 0.0 {
                continue;
            }
            for c in col..(n + m) {
                let v = aug.get(r, c) - f * aug.get(col, c);
                aug.set(r, c, v);
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for c in 0..m {
        for r in (0..n).rev() {
            let mut s = aug.get(r, n + c);
            for k in (r + 1)..n {
                s -= aug.get(r, k) * x.get(k, c);
            }
            x.set(r, c, s / aug.get(r, r));
        }
    }
    Ok(x)
}
