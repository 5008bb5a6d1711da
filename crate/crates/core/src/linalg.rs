//! Minimal dense linear algebra over `f64`: row-major matrices, symmetric
//! eigendecomposition by cyclic Jacobi rotations, Moore-Penrose pseudoinverse,
//! damped solves, and truncated conjugate gradient.
//!
//! Everything here is deterministic and allocation-happy by design; the
//! matrices in this workspace stay small (at most a few hundred columns), so
//! clarity wins over tiling tricks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative eigenvalue cutoff used when a pseudoinverse has to decide
/// what counts as numerically zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Default relative symmetry tolerance accepted by [`sym_eig`].
pub const DEFAULT_SYM_TOL: f64 = 1e-9;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is asymmetric beyond tolerance: max |m_ij - m_ji| = {deviation:.3e}")]
    AsymmetricBeyondTol { deviation: f64 },
    #[error("Jacobi sweep limit ({0}) exceeded without convergence")]
    NoConvergence(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("damping factor must be positive, got {0}")]
    NonPositiveDamping(f64),
    #[error("non-finite entry at index {0}")]
    NonFiniteEntry(usize),
    #[error("data length {got} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, got: usize },
}

/// Dense real vector. Entries are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        match data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(LinalgError::NonFiniteEntry(i)),
            None => Ok(Self { data }),
        }
    }

    /// Builds a vector from a slice, panicking on non-finite entries.
    /// Intended for literals; use [`Vector::new`] for untrusted data.
    pub fn from_slice(data: &[f64]) -> Self {
        Self::new(data.to_vec()).expect("finite entries")
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|x| x.is_finite()));
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector::from_raw(self.data.iter().map(|x| x * s).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector::from_raw(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector::from_raw(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Vector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense real matrix in row-major order. Entries are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadDataLength { rows, cols, got: data.len() });
        }
        match data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(LinalgError::NonFiniteEntry(i)),
            None => Ok(Self { rows, cols, data }),
        }
    }

    /// Builds a matrix from row slices, panicking on ragged or non-finite input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data).expect("finite entries")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|x| x.is_finite()));
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = self.row(i).iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
        }
        Vector::from_raw(out)
    }

    /// `selfᵀ v` without materializing the transpose.
    pub fn matvec_transposed(&self, v: &Vector) -> Vector {
        assert_eq!(self.rows, v.len(), "matvec_transposed dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Vector::from_raw(out)
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += aik * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        DenseMatrix::from_raw(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        DenseMatrix::from_raw(self.rows, self.cols, data)
    }

    pub fn scaled(&self, s: f64) -> DenseMatrix {
        DenseMatrix::from_raw(self.rows, self.cols, self.data.iter().map(|x| x * s).collect())
    }

    /// Largest absolute entry (the max norm).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest `|m_ij - m_ji|` over all pairs; zero for the empty matrix.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let mut dev: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                dev = dev.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        dev
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector::from_raw((0..self.rows).map(|i| self.get(i, j)).collect())
    }
}

/// Eigendecomposition of a real symmetric matrix: `m = U diag(λ) Uᵀ` with the
/// eigenvalues sorted descending and eigenvectors stored as the columns of `U`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Applies `U f(diag(λ)) Uᵀ` to a vector, for a scalar spectral map `f`.
    pub fn apply_spectral_map(&self, map: impl Fn(f64) -> f64, v: &Vector) -> Vector {
        let u = &self.eigenvectors;
        let mut coeffs = u.matvec_transposed(v);
        for (c, &lam) in coeffs.as_mut_slice().iter_mut().zip(&self.eigenvalues) {
            *c *= map(lam);
        }
        u.matvec(&coeffs)
    }

    /// Materializes `U f(diag(λ)) Uᵀ` as a matrix.
    pub fn spectral_map_matrix(&self, map: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.dim();
        let u = &self.eigenvectors;
        let mut out = DenseMatrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let f = map(lam);
            if f == 0.0 {
                continue;
            }
            for i in 0..n {
                let uif = u.get(i, k) * f;
                if uif == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.get(i, j) + uif * u.get(j, k);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

/// Symmetric eigendecomposition via cyclic Jacobi rotations.
///
/// `tol` bounds the accepted relative asymmetry of the input (checked against
/// the max norm). At most 100 sweeps; terminates once the off-diagonal
/// Frobenius norm drops below `1e-12 · ‖m‖_F`.
pub fn sym_eig(m: &DenseMatrix, tol: f64) -> Result<EigenDecomposition, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NonSquare { rows: m.rows, cols: m.cols });
    }
    let n = m.rows;
    let dev = m.asymmetry();
    if dev > tol * m.max_abs() {
        return Err(LinalgError::AsymmetricBeyondTol { deviation: dev });
    }

    // Work on the symmetrized copy so the rotations see an exactly symmetric
    // matrix regardless of roundoff in the input.
    let mut a = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_OFF_TOL * a.fro_norm();

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= threshold;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of `a`.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                // Accumulate the rotation into the eigenvector columns.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        converged = off_norm(&a) <= threshold;
    }
    if !converged {
        return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// Moore-Penrose pseudoinverse.
///
/// Square symmetric input goes through [`sym_eig`] directly, zeroing
/// eigenvalues below `rank_tol · max|λ|`. Everything else reduces to the
/// symmetric case through the normal equations: `M⁺ = (MᵀM)⁺Mᵀ` when
/// `rows ≥ cols` and `M⁺ = Mᵀ(MMᵀ)⁺` otherwise.
pub fn pinv(m: &DenseMatrix, rank_tol: f64) -> DenseMatrix {
    if m.rows == 0 || m.cols == 0 {
        return DenseMatrix::zeros(m.cols, m.rows);
    }
    if m.is_square() && m.asymmetry() <= 1e-12 * m.max_abs() {
        return pinv_symmetric(m, rank_tol);
    }
    let mt = m.transpose();
    if m.rows >= m.cols {
        pinv_symmetric(&mt.matmul(m), rank_tol).matmul(&mt)
    } else {
        mt.matmul(&pinv_symmetric(&m.matmul(&mt), rank_tol))
    }
}

fn pinv_symmetric(m: &DenseMatrix, rank_tol: f64) -> DenseMatrix {
    let eig = sym_eig(m, DEFAULT_SYM_TOL).expect("symmetric input");
    let cutoff = rank_tol * eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    eig.spectral_map_matrix(|lam| if lam.abs() > cutoff { 1.0 / lam } else { 0.0 })
}

/// Result of a truncated conjugate gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolve {
    pub solution: Vector,
    /// Set when a search direction hit non-positive curvature and the solve
    /// stopped at the current iterate.
    pub breakdown: bool,
    pub iterations: usize,
}

/// Runs `k` conjugate gradient iterations on `h x = b` from the zero vector.
///
/// `k = 0` returns the zero vector. For `k ≥ rank(h)` on a consistent system
/// the result solves `h x = proj_range(h)(b)` up to roundoff.
pub fn truncated_cg(h: &DenseMatrix, b: &Vector, k: usize) -> Result<CgSolve, LinalgError> {
    if !h.is_square() {
        return Err(LinalgError::NonSquare { rows: h.rows, cols: h.cols });
    }
    if h.cols != b.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "matrix is {}x{} but rhs has length {}",
            h.rows,
            h.cols,
            b.len()
        )));
    }
    let mut x = Vector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let scale = 1.0 + h.max_abs();
    let mut breakdown = false;
    let mut iterations = 0;
    for _ in 0..k {
        if rs.sqrt() <= 1e-15 * (1.0 + b.norm()) {
            break;
        }
        let hp = h.matvec(&p);
        let curvature = p.dot(&hp);
        if curvature <= 1e-14 * p.dot(&p) * scale {
            breakdown = true;
            break;
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &hp);
        let rs_next = r.dot(&r);
        p = r.add(&p.scaled(rs_next / rs));
        rs = rs_next;
        iterations += 1;
    }
    Ok(CgSolve { solution: x, breakdown, iterations })
}

/// Solves `(h + eps·I) x = b` through the eigendecomposition of `h`, mapping
/// each eigenvalue `λ` to `1/(λ + eps)`.
pub fn solve_damped(h: &DenseMatrix, eps: f64, b: &Vector) -> Result<Vector, LinalgError> {
    if eps <= 0.0 {
        return Err(LinalgError::NonPositiveDamping(eps));
    }
    if h.cols != b.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "matrix is {}x{} but rhs has length {}",
            h.rows,
            h.cols,
            b.len()
        )));
    }
    let eig = sym_eig(h, DEFAULT_SYM_TOL)?;
    Ok(eig.apply_spectral_map(|lam| 1.0 / (lam + eps), b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(2, 1, vec![1.0, f64::INFINITY]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn sym_eig_identity() {
        let eig = sym_eig(&DenseMatrix::identity(2), DEFAULT_SYM_TOL).unwrap();
        assert_close(eig.eigenvalues[0], 1.0, 1e-14);
        assert_close(eig.eigenvalues[1], 1.0, 1e-14);
    }

    #[test]
    fn sym_eig_diagonal() {
        let m = DenseMatrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let eig = sym_eig(&m, DEFAULT_SYM_TOL).unwrap();
        assert_close(eig.eigenvalues[0], 3.0, 1e-14);
        assert_close(eig.eigenvalues[1], 1.0, 1e-14);
        // axis-aligned eigenvectors for the dominant eigenvalue
        assert_close(eig.eigenvectors.get(0, 0).abs(), 1.0, 1e-12);
        assert_close(eig.eigenvectors.get(1, 0).abs(), 0.0, 1e-12);
    }

    #[test]
    fn sym_eig_two_by_two_hand_solved() {
        // [[2,1],[1,2]] has characteristic polynomial (2-λ)² - 1, roots 3 and 1,
        // with eigenvectors (1,1)/√2 and (1,-1)/√2.
        let m = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let eig = sym_eig(&m, DEFAULT_SYM_TOL).unwrap();
        assert_close(eig.eigenvalues[0], 3.0, 1e-12);
        assert_close(eig.eigenvalues[1], 1.0, 1e-12);
        let s = 0.5f64.sqrt();
        let v0 = eig.eigenvectors.column(0);
        assert_close(v0[0].abs(), s, 1e-12);
        assert_close(v0[1].abs(), s, 1e-12);
        assert_close(v0[0] * v0[1], s * s, 1e-12); // same sign
        let v1 = eig.eigenvectors.column(1);
        assert_close(v1[0] * v1[1], -s * s, 1e-12); // opposite sign
    }

    #[test]
    fn sym_eig_rejects_bad_input() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(sym_eig(&m, 1e-9), Err(LinalgError::NonSquare { .. })));
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&m, 1e-9), Err(LinalgError::AsymmetricBeyondTol { .. })));
    }

    #[test]
    fn sym_eig_zero_matrix() {
        let eig = sym_eig(&DenseMatrix::zeros(3, 3), DEFAULT_SYM_TOL).unwrap();
        assert_eq!(eig.eigenvalues, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        let p = pinv(&DenseMatrix::identity(3), DEFAULT_RANK_TOL);
        assert!(p.sub(&DenseMatrix::identity(3)).max_abs() < 1e-12);
        let m = DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]);
        let p = pinv(&m, DEFAULT_RANK_TOL);
        assert_close(p.get(0, 0), 0.5, 1e-12);
        assert_close(p.get(1, 1), 0.0, 1e-12);
    }

    #[test]
    fn pinv_rectangular_column() {
        // column [1;2]: pseudoinverse is the row [0.2, 0.4] since ΦᵀΦ = 5.
        let m = DenseMatrix::from_rows(&[&[1.0], &[2.0]]);
        let p = pinv(&m, DEFAULT_RANK_TOL);
        assert_eq!((p.rows(), p.cols()), (1, 2));
        assert_close(p.get(0, 0), 0.2, 1e-12);
        assert_close(p.get(0, 1), 0.4, 1e-12);
    }

    #[test]
    fn pinv_zero_matrix_is_zero() {
        let p = pinv(&DenseMatrix::zeros(2, 3), DEFAULT_RANK_TOL);
        assert_eq!((p.rows(), p.cols()), (3, 2));
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn cg_identity_single_step() {
        let b = Vector::from_slice(&[1.0, -2.0, 0.5]);
        let out = truncated_cg(&DenseMatrix::identity(3), &b, 1).unwrap();
        assert!(out.solution.sub(&b).norm() < 1e-14);
        assert!(!out.breakdown);
    }

    #[test]
    fn cg_scalar_multiple_of_identity_converges_in_one_step() {
        let h = DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]);
        let b = Vector::from_slice(&[2.0, 4.0]);
        let out = truncated_cg(&h, &b, 1).unwrap();
        assert!(out.solution.sub(&Vector::from_slice(&[1.0, 2.0])).norm() < 1e-14);
    }

    #[test]
    fn cg_zero_iterations_returns_zero() {
        let b = Vector::from_slice(&[3.0, 4.0]);
        let out = truncated_cg(&DenseMatrix::identity(2), &b, 0).unwrap();
        assert_eq!(out.solution.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn cg_flags_breakdown_on_singular_direction() {
        // b lives partly in the nullspace of h, so curvature collapses once
        // the range component is solved.
        let h = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = Vector::from_slice(&[1.0, 1.0]);
        let out = truncated_cg(&h, &b, 5).unwrap();
        assert!(out.breakdown);
        assert!(out.solution.as_slice()[0].is_finite());
    }

    #[test]
    fn cg_dimension_mismatch() {
        let b = Vector::from_slice(&[1.0]);
        assert!(truncated_cg(&DenseMatrix::identity(2), &b, 1).is_err());
    }

    #[test]
    fn damped_solve_pure_damping() {
        let h = DenseMatrix::zeros(2, 2);
        let b = Vector::from_slice(&[3.0, 4.0]);
        let x = solve_damped(&h, 1.0, &b).unwrap();
        assert!(x.sub(&b).norm() < 1e-12);
    }

    #[test]
    fn damped_solve_identity() {
        let h = DenseMatrix::identity(2);
        let b = Vector::from_slice(&[2.0, 2.0]);
        let x = solve_damped(&h, 1.0, &b).unwrap();
        assert!(x.sub(&Vector::from_slice(&[1.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn damped_solve_rejects_non_positive_eps() {
        let h = DenseMatrix::identity(2);
        let b = Vector::from_slice(&[1.0, 1.0]);
        assert!(matches!(solve_damped(&h, 0.0, &b), Err(LinalgError::NonPositiveDamping(_))));
    }
}
