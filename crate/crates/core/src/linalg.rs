//! Minimal dense linear algebra for the small symmetric systems that appear
//! in the variance and criteria computations (dimension is the number of
//! propensity-model covariates, typically below 20).
//!
//! Provides a Cholesky solver for symmetric positive-definite systems, a
//! partial-pivoting LU solver for the general sandwich bread, and a cyclic
//! Jacobi bound on the smallest eigenvalue of a symmetrized matrix.

use thiserror::Error;

/// Relative pivot tolerance for the Cholesky factorization.
const SPD_PIVOT_TOL: f64 = 1e-12;

/// Relative symmetry tolerance accepted by [`solve_spd`].
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot:.3e} at column {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,
    #[error("matrix is singular (pivot column {0})")]
    Singular(usize),
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("Jacobi eigenvalue iteration failed to converge")]
    EigenNoConvergence,
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(LinalgError::DimensionMismatch("empty matrix".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.iter().flatten().copied().collect())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Adds `scale * x xᵀ` in place. `x` must match the (square) dimension.
    pub fn add_scaled_outer(&mut self, x: &[f64], scale: f64) {
        debug_assert_eq!(self.rows, self.cols);
        debug_assert_eq!(x.len(), self.rows);
        for i in 0..self.rows {
            let si = scale * x[i];
            for j in 0..self.cols {
                self.data[i * self.cols + j] += si * x[j];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "matrix has {} columns, vector has length {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `(A + Aᵀ)/2`; requires a square matrix.
    pub fn symmetrized(&self) -> Result<Matrix, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::NonSquare { rows: self.rows, cols: self.cols });
        }
        let mut s = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                s[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)]);
            }
        }
        Ok(s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix, reusable
/// across several right-hand sides.
#[derive(Debug, Clone)]
pub struct Cholesky {
    // lower triangle, row-major
    l: Vec<f64>,
    n: usize,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NonSquare { rows: a.rows, cols: a.cols });
        }
        let n = a.rows;
        let scale = a.max_abs().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(LinalgError::NotSymmetric);
                }
            }
        }
        let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)]));
        if max_diag <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { index: 0, pivot: max_diag });
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= SPD_PIVOT_TOL * max_diag {
                return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / dj;
            }
        }
        Ok(Self { l, n })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch(format!(
                "system is {}-dimensional, rhs has length {}",
                self.n,
                b.len()
            )));
        }
        let n = self.n;
        // forward: L y = b
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        Ok(y)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    Cholesky::new(a)?.solve(b)
}

/// Dot product `uᵀ(A⁻¹v)` where the second argument is a prior
/// [`solve_spd`] result.
pub fn quadratic_form(u: &[f64], a_inv_v: &[f64]) -> Result<f64, LinalgError> {
    if u.len() != a_inv_v.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "vector lengths {} and {}",
            u.len(),
            a_inv_v.len()
        )));
    }
    Ok(u.iter().zip(a_inv_v).map(|(a, b)| a * b).sum())
}

/// Smallest eigenvalue of `(A + Aᵀ)/2` via cyclic Jacobi rotations.
pub fn min_eig_sym(a: &Matrix) -> Result<f64, LinalgError> {
    let mut m = a.symmetrized()?;
    let n = m.rows();
    if n == 1 {
        return Ok(m[(0, 0)]);
    }
    // Absolute 1e-12 is unreachable in f64 once the matrix norm exceeds ~1e4,
    // so the off-diagonal target scales with the norm.
    let tol = 1e-12 * (1.0 + m.frobenius_norm());
    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += m[(i, j)] * m[(i, j)];
                    }
                }
            }
            s.sqrt()
        };
        if off < tol {
            let mut min = f64::INFINITY;
            for i in 0..n {
                min = min.min(m[(i, i)]);
            }
            return Ok(min);
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    Err(LinalgError::EigenNoConvergence)
}

/// Solves `A x = b` for a general square matrix via LU with partial pivoting.
pub fn solve_lu(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NonSquare { rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "system is {n}-dimensional, rhs has length {}",
            b.len()
        )));
    }
    let mut lu = a.data.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[col * n + col].abs();
        for r in (col + 1)..n {
            let v = lu[r * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val <= 1e-14 * scale {
            return Err(LinalgError::Singular(col));
        }
        if pivot_row != col {
            for k in 0..n {
                lu.swap(col * n + k, pivot_row * n + k);
            }
            x.swap(col, pivot_row);
        }
        let p = lu[col * n + col];
        for r in (col + 1)..n {
            let f = lu[r * n + col] / p;
            lu[r * n + col] = f;
            for k in (col + 1)..n {
                lu[r * n + k] -= f * lu[col * n + k];
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= lu[i * n + k] * x[k];
        }
        x[i] /= lu[i * n + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_spd(rng: &mut SplitMix64, n: usize) -> Matrix {
        // MᵀM + 0.1 I is SPD
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = rng.next_f64() * 2.0 - 1.0;
            }
        }
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += m[(k, i)] * m[(k, j)];
                }
                a[(i, j)] = s + if i == j { 0.1 } else { 0.0 };
            }
        }
        a
    }

    /// Gauss-Jordan inverse, used only as an independent oracle.
    fn dense_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if aug[(r, col)].abs() > aug[(piv, col)].abs() {
                    piv = r;
                }
            }
            for k in 0..2 * n {
                let tmp = aug[(col, k)];
                aug[(col, k)] = aug[(piv, k)];
                aug[(piv, k)] = tmp;
            }
            let p = aug[(col, col)];
            for k in 0..2 * n {
                aug[(col, k)] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = aug[(r, col)];
                for k in 0..2 * n {
                    aug[(r, k)] -= f * aug[(col, k)];
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    #[test]
    fn solve_identity() {
        let a = Matrix::identity(2);
        let x = solve_spd(&a, &[3.0, -1.0]).unwrap();
        assert_eq!(x, vec![3.0, -1.0]);
    }

    #[test]
    fn solve_diagonal() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve_spd(&a, &[2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_multiply_back() {
        let mut rng = SplitMix64::new(42);
        for trial in 0..50 {
            let n = 1 + (trial % 12);
            let a = random_spd(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
            let x = solve_spd(&a, &b).unwrap();
            let ax = a.mul_vec(&x).unwrap();
            let bmax = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                assert!(
                    (ax[i] - b[i]).abs() <= 1e-9 * (1.0 + bmax),
                    "residual {} too large (n={n})",
                    (ax[i] - b[i]).abs()
                );
            }
        }
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_spd(&a, &[1.0, 1.0]),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn solve_spd_rejects_asymmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(solve_spd(&a, &[1.0, 1.0]), Err(LinalgError::NotSymmetric)));
    }

    #[test]
    fn solve_spd_dimension_mismatch() {
        let a = Matrix::identity(3);
        assert!(matches!(
            solve_spd(&a, &[1.0, 2.0]),
            Err(LinalgError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn quadratic_form_identity_cases() {
        // A = I, so A⁻¹v = v
        assert_eq!(quadratic_form(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(quadratic_form(&[1.0, 1.0], &[2.0, 3.0]).unwrap(), 5.0);
        assert!(quadratic_form(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quadratic_form_matches_dense_inverse() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..20 {
            let n = 2 + (rng.next_u64() % 6) as usize;
            let a = random_spd(&mut rng, n);
            let u: Vec<f64> = (0..n).map(|_| rng.next_f64() - 0.5).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.next_f64() - 0.5).collect();
            let q = quadratic_form(&u, &solve_spd(&a, &v).unwrap()).unwrap();
            let inv = dense_inverse(&a);
            let mut expect = 0.0;
            for i in 0..n {
                for j in 0..n {
                    expect += u[i] * inv[(i, j)] * v[j];
                }
            }
            assert!((q - expect).abs() <= 1e-10 * (1.0 + expect.abs()), "{q} vs {expect}");
        }
    }

    #[test]
    fn min_eig_diagonal_and_zero() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ])
        .unwrap();
        assert!((min_eig_sym(&a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(min_eig_sym(&Matrix::zeros(4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn min_eig_rejects_non_square() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(min_eig_sym(&a), Err(LinalgError::NonSquare { .. })));
    }

    /// Closed-form eigenvalues of a symmetric 3x3 via the trigonometric cubic
    /// solution; independent oracle for the Jacobi iteration.
    fn cubic_min_eig(a: &Matrix) -> f64 {
        let (a11, a12, a13) = (a[(0, 0)], a[(0, 1)], a[(0, 2)]);
        let (a22, a23, a33) = (a[(1, 1)], a[(1, 2)], a[(2, 2)]);
        let p1 = a12 * a12 + a13 * a13 + a23 * a23;
        if p1 == 0.0 {
            return a11.min(a22).min(a33);
        }
        let q = (a11 + a22 + a33) / 3.0;
        let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = |i: usize, j: usize| (a[(i, j)] - if i == j { q } else { 0.0 }) / p;
        let detb = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
            - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
            + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
        let r = (detb / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        // smallest root
        q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
    }

    #[test]
    fn min_eig_matches_characteristic_polynomial() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..40 {
            let mut a = Matrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..=i {
                    let v = rng.next_f64() * 4.0 - 2.0;
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            let jac = min_eig_sym(&a).unwrap();
            let cubic = cubic_min_eig(&a);
            assert!((jac - cubic).abs() < 1e-8, "{jac} vs {cubic}");
        }
    }

    #[test]
    fn min_eig_uses_symmetric_part() {
        // xᵀMx = xᵀ((M+Mᵀ)/2)x, so the asymmetric part must not matter
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        let s = m.symmetrized().unwrap();
        assert!((min_eig_sym(&m).unwrap() - min_eig_sym(&s).unwrap()).abs() < 1e-12);
        assert!((min_eig_sym(&m).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn solve_lu_general_and_singular() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap();
        let x = solve_lu(&a, &[3.0, 7.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);

        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(solve_lu(&s, &[1.0, 1.0]), Err(LinalgError::Singular(_))));
    }

    #[test]
    fn solve_lu_multiply_back() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..30 {
            let n = 2 + (rng.next_u64() % 6) as usize;
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.next_f64() * 2.0 - 1.0;
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let x = match solve_lu(&a, &b) {
                Ok(x) => x,
                Err(LinalgError::Singular(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            let ax = a.mul_vec(&x).unwrap();
            for i in 0..n {
                assert!((ax[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matrix_validation() {
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(0, 1, vec![]).is_err());
    }
}
