//! Convex quadratic bilevel problems with closed-form inner solutions.
//!
//! The inner objective is
//! `f(u, w) = ½wᵀAw + wᵀBu + ½uᵀCu + dᵀw + eᵀu + c` with `A` PSD, and the
//! outer objective `F(u, w) = ½wᵀPw + fᵀw + h` with `P` PSD depends on `w`
//! only. Gradient descent on the inner problem lands on the minimizer closest
//! to its initialization, which is what the closed forms here compute.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergrad::BilevelProblem;
use crate::linalg::{pinv, sym_eig, DenseMatrix, EigenDecomposition, LinalgError, Vector};
use crate::linalg::{DEFAULT_RANK_TOL, DEFAULT_SYM_TOL};

/// Relative negative-eigenvalue slack accepted when certifying PSD curvature.
const PSD_TOL: f64 = 1e-9;
/// Number of random probe directions used to certify lower-boundedness.
const BOUNDEDNESS_PROBES: usize = 8;

#[derive(Debug, Error)]
pub enum QuadraticError {
    #[error("{name} must be {expected}, got {got}")]
    BadShape { name: &'static str, expected: String, got: String },
    #[error("{name} is not positive semi-definite: min eigenvalue {min_eig:.3e}")]
    NotPsd { name: &'static str, min_eig: f64 },
    #[error("inner objective is unbounded below: residual {residual:.3e} outside range(A)")]
    UnboundedInner { residual: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("fixture parse error: {0}")]
    Parse(String),
}

/// The matrices and vectors defining one quadratic bilevel problem, in the
/// shape used for (de)serialization. See [`QuadraticBilevel::new`] for the
/// invariants enforced on top of these raw fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticBilevelData {
    /// Inner curvature `A`, `|W|x|W|` PSD.
    pub a: DenseMatrix,
    /// Coupling `B`, `|W|x|U|`.
    pub b: DenseMatrix,
    /// Outer-only inner curvature block `C`, `|U|x|U|`.
    pub c: DenseMatrix,
    /// Inner linear term `d`, length `|W|`.
    pub d: Vector,
    /// Outer-only inner linear term `e`, length `|U|`.
    pub e: Vector,
    /// Inner constant.
    pub c_scalar: f64,
    /// Outer curvature `P`, `|W|x|W|` PSD.
    pub p: DenseMatrix,
    /// Outer linear term, length `|W|`.
    pub f: Vector,
    /// Outer constant.
    pub h_scalar: f64,
}

/// A validated quadratic bilevel problem with cached spectral data for `A`.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    data: QuadraticBilevelData,
    a_eig: EigenDecomposition,
    a_pinv: DenseMatrix,
    /// Projector onto range(A); equals `A A⁺ = A⁺A` for symmetric `A`.
    range_proj: DenseMatrix,
}

impl QuadraticBilevel {
    pub fn new(data: QuadraticBilevelData) -> Result<Self, QuadraticError> {
        let (nw, nu) = (data.a.rows(), data.b.cols());
        let shape_err = |name: &'static str, expected: String, got: String| {
            Err(QuadraticError::BadShape { name, expected, got })
        };
        if !data.a.is_square() {
            return shape_err("A", "square".into(), format!("{}x{}", data.a.rows(), data.a.cols()));
        }
        if data.b.rows() != nw {
            return shape_err("B", format!("{nw} rows"), format!("{} rows", data.b.rows()));
        }
        if data.c.rows() != nu || data.c.cols() != nu {
            return shape_err("C", format!("{nu}x{nu}"), format!("{}x{}", data.c.rows(), data.c.cols()));
        }
        if data.d.len() != nw {
            return shape_err("d", format!("length {nw}"), format!("length {}", data.d.len()));
        }
        if data.e.len() != nu {
            return shape_err("e", format!("length {nu}"), format!("length {}", data.e.len()));
        }
        if data.p.rows() != nw || data.p.cols() != nw {
            return shape_err("P", format!("{nw}x{nw}"), format!("{}x{}", data.p.rows(), data.p.cols()));
        }
        if data.f.len() != nw {
            return shape_err("f", format!("length {nw}"), format!("length {}", data.f.len()));
        }

        let a_eig = sym_eig(&data.a, DEFAULT_SYM_TOL)?;
        check_psd("A", &a_eig)?;
        let p_eig = sym_eig(&data.p, DEFAULT_SYM_TOL)?;
        check_psd("P", &p_eig)?;

        let cutoff = DEFAULT_RANK_TOL * a_eig.lambda_max().abs();
        let a_pinv = a_eig.spectral_map_matrix(|l| if l.abs() > cutoff { 1.0 / l } else { 0.0 });
        let range_proj = a_eig.spectral_map_matrix(|l| if l.abs() > cutoff { 1.0 } else { 0.0 });

        let problem = Self { data, a_eig, a_pinv, range_proj };

        // Lower-boundedness needs d + Bu in range(A) for every u of interest.
        // Certify with the origin plus a handful of fixed pseudorandom probes;
        // per-iterate values are re-checked on demand by the closed forms.
        problem.check_lower_bounded_at(&Vector::zeros(nu))?;
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..BOUNDEDNESS_PROBES {
            let mut probe = Vec::with_capacity(nu);
            for _ in 0..nu {
                // splitmix64, mapped into [-1, 1]
                state = state.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                z ^= z >> 31;
                probe.push((z >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0);
            }
            problem.check_lower_bounded_at(&Vector::from_slice(&probe))?;
        }
        Ok(problem)
    }

    pub fn data(&self) -> &QuadraticBilevelData {
        &self.data
    }

    pub fn inner_dim(&self) -> usize {
        self.data.a.rows()
    }

    pub fn outer_dim(&self) -> usize {
        self.data.b.cols()
    }

    pub fn a_eig(&self) -> &EigenDecomposition {
        &self.a_eig
    }

    pub fn a_pinv(&self) -> &DenseMatrix {
        &self.a_pinv
    }

    pub fn lambda_max_inner(&self) -> f64 {
        self.a_eig.lambda_max()
    }

    /// Verifies `Bu + d ∈ range(A)` at a specific `u`.
    pub fn check_lower_bounded_at(&self, u: &Vector) -> Result<(), QuadraticError> {
        let rhs = self.data.b.matvec(u).add(&self.data.d);
        let residual = rhs.sub(&self.range_proj.matvec(&rhs)).norm();
        if residual > 1e-8 * (1.0 + rhs.norm()) {
            return Err(QuadraticError::UnboundedInner { residual });
        }
        Ok(())
    }

    /// Inner objective value `f(u, w)`, including the `u`-only terms.
    pub fn inner_value(&self, u: &Vector, w: &Vector) -> f64 {
        let aw = self.data.a.matvec(w);
        let bu = self.data.b.matvec(u);
        let cu = self.data.c.matvec(u);
        0.5 * w.dot(&aw)
            + w.dot(&bu)
            + 0.5 * u.dot(&cu)
            + self.data.d.dot(w)
            + self.data.e.dot(u)
            + self.data.c_scalar
    }

    /// Inner gradient `∇_w f = Aw + Bu + d`.
    pub fn inner_grad(&self, u: &Vector, w: &Vector) -> Result<Vector, QuadraticError> {
        if u.len() != self.outer_dim() || w.len() != self.inner_dim() {
            return Err(QuadraticError::DimensionMismatch(format!(
                "u has length {} (want {}), w has length {} (want {})",
                u.len(),
                self.outer_dim(),
                w.len(),
                self.inner_dim()
            )));
        }
        let mut g = self.data.a.matvec(w);
        g.axpy(1.0, &self.data.b.matvec(u));
        g.axpy(1.0, &self.data.d);
        Ok(g)
    }

    /// Outer objective value `F(u, w) = ½wᵀPw + fᵀw + h`.
    pub fn outer_value(&self, w: &Vector) -> f64 {
        0.5 * w.dot(&self.data.p.matvec(w)) + self.data.f.dot(w) + self.data.h_scalar
    }

    /// Outer gradient `∂F/∂w = Pw + f`.
    pub fn outer_grad_w(&self, w: &Vector) -> Vector {
        let mut g = self.data.p.matvec(w);
        g.axpy(1.0, &self.data.f);
        g
    }

    /// The inner minimizer with least displacement from `w0`:
    /// `-A⁺(Bu + d) + (I - A⁺A)w0`.
    pub fn inner_min_displacement(&self, u: &Vector, w0: &Vector) -> Result<Vector, QuadraticError> {
        self.check_lower_bounded_at(u)?;
        let rhs = self.data.b.matvec(u).add(&self.data.d);
        let mut w = self.a_pinv.matvec(&rhs).scaled(-1.0);
        // (I - A⁺A) w0 = w0 - proj_range(A) w0
        w.axpy(1.0, w0);
        w.axpy(-1.0, &self.range_proj.matvec(w0));
        Ok(w)
    }

    /// The full solution set of the inner problem at `u`: one particular
    /// minimizer plus an orthonormal basis of the nullspace of `A` (the
    /// eigenvectors whose eigenvalue is at most `tol · λ_max`).
    pub fn solution_set(&self, u: &Vector, tol: f64) -> Result<SolutionSet, QuadraticError> {
        let particular = self.inner_min_displacement(u, &Vector::zeros(self.inner_dim()))?;
        let cutoff = tol * self.a_eig.lambda_max().abs();
        let null_idx: Vec<usize> = (0..self.a_eig.dim())
            .filter(|&i| self.a_eig.eigenvalues[i].abs() <= cutoff)
            .collect();
        let n = self.inner_dim();
        let mut basis = DenseMatrix::zeros(n, null_idx.len());
        for (dst, &src) in null_idx.iter().enumerate() {
            for k in 0..n {
                basis.set(k, dst, self.a_eig.eigenvectors.get(k, src));
            }
        }
        Ok(SolutionSet { particular, nullspace_basis: basis })
    }

    /// Reduces the outer objective through the min-norm inner solution
    /// (`w0 = 0`), producing `F*(u) = ½uᵀZu + linᵀu + const` with
    /// `Z = BᵀA⁺PA⁺B`.
    pub fn reduce_outer(&self) -> Result<ReducedOuterQuadratic, QuadraticError> {
        self.check_lower_bounded_at(&Vector::zeros(self.outer_dim()))?;
        let apb = self.a_pinv.matmul(&self.data.b); // A⁺B
        let p_apb = self.data.p.matmul(&apb);
        let z = apb.transpose().matmul(&p_apb);
        let apd = self.a_pinv.matvec(&self.data.d);
        // lin = BᵀA⁺PA⁺d - BᵀA⁺f
        let mut lin = apb.matvec_transposed(&self.data.p.matvec(&apd));
        lin.axpy(-1.0, &apb.matvec_transposed(&self.data.f));
        let constant =
            0.5 * apd.dot(&self.data.p.matvec(&apd)) - self.data.f.dot(&apd) + self.data.h_scalar;
        Ok(ReducedOuterQuadratic { z, linear: lin, constant })
    }

    /// The outer solution reached by exact cold-start descent from `u0`:
    /// the minimizer of the reduced quadratic closest to `u0`.
    pub fn cold_start_outer_oracle(&self, u0: &Vector) -> Result<Vector, QuadraticError> {
        let reduced = self.reduce_outer()?;
        let z_pinv = pinv(&reduced.z, DEFAULT_RANK_TOL);
        let mut u = z_pinv.matvec(&reduced.linear).scaled(-1.0);
        u.axpy(1.0, u0);
        u.axpy(-1.0, &z_pinv.matvec(&reduced.z.matvec(u0)));
        Ok(u)
    }

    /// Serializes the defining matrices as a TOML document.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.data).expect("serializable fixture")
    }

    /// Parses and re-validates a problem from its TOML fixture form.
    pub fn from_toml(text: &str) -> Result<Self, QuadraticError> {
        let data: QuadraticBilevelData =
            toml::from_str(text).map_err(|e| QuadraticError::Parse(e.to_string()))?;
        Self::new(data)
    }
}

fn check_psd(name: &'static str, eig: &EigenDecomposition) -> Result<(), QuadraticError> {
    let lam_max = eig.lambda_max().max(0.0);
    let min_eig = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if min_eig < -PSD_TOL * lam_max.max(1.0) {
        return Err(QuadraticError::NotPsd { name, min_eig });
    }
    Ok(())
}

/// The inner solution set at a fixed `u`: `{particular + n | n ∈ N(A)}`.
#[derive(Debug, Clone)]
pub struct SolutionSet {
    pub particular: Vector,
    /// Orthonormal columns spanning the nullspace of `A`.
    pub nullspace_basis: DenseMatrix,
}

/// The outer objective after plugging in the min-norm inner solution:
/// a convex quadratic in `u`.
#[derive(Debug, Clone)]
pub struct ReducedOuterQuadratic {
    pub z: DenseMatrix,
    pub linear: Vector,
    pub constant: f64,
}

impl ReducedOuterQuadratic {
    pub fn value(&self, u: &Vector) -> f64 {
        0.5 * u.dot(&self.z.matvec(u)) + self.linear.dot(u) + self.constant
    }

    pub fn grad(&self, u: &Vector) -> Vector {
        let mut g = self.z.matvec(u);
        g.axpy(1.0, &self.linear);
        g
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn inner_dim(&self) -> usize {
        self.inner_dim()
    }

    fn outer_dim(&self) -> usize {
        self.outer_dim()
    }

    fn inner_loss(&self, u: &Vector, w: &Vector) -> f64 {
        self.inner_value(u, w)
    }

    fn outer_loss(&self, _u: &Vector, w: &Vector) -> f64 {
        self.outer_value(w)
    }

    fn inner_grad(&self, u: &Vector, w: &Vector) -> Vector {
        QuadraticBilevel::inner_grad(self, u, w).expect("dimensions checked by caller")
    }

    fn inner_hess(&self, _u: &Vector, _w: &Vector) -> DenseMatrix {
        self.data.a.clone()
    }

    fn mixed(&self, _u: &Vector, _w: &Vector) -> DenseMatrix {
        self.data.b.clone()
    }

    fn outer_grad_w(&self, _u: &Vector, w: &Vector) -> Vector {
        self.outer_grad_w(w)
    }
}

/// Convenience constructor used across tests and experiments: builds the
/// problem from `A`, `B`, `d`, `P`, `f` with the `u`-only terms zeroed.
pub fn quadratic_without_u_terms(
    a: DenseMatrix,
    b: DenseMatrix,
    d: Vector,
    p: DenseMatrix,
    f: Vector,
    h_scalar: f64,
) -> Result<QuadraticBilevel, QuadraticError> {
    let nu = b.cols();
    QuadraticBilevel::new(QuadraticBilevelData {
        a,
        b,
        c: DenseMatrix::zeros(nu, nu),
        d,
        e: Vector::zeros(nu),
        c_scalar: 0.0,
        p,
        f,
        h_scalar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_problem() -> QuadraticBilevel {
        // A = diag(1, 0): rank-deficient inner curvature with B, d in range(A).
        let a = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = DenseMatrix::from_rows(&[&[1.0], &[0.0]]);
        let d = Vector::zeros(2);
        let p = DenseMatrix::identity(2);
        let f = Vector::zeros(2);
        quadratic_without_u_terms(a, b, d, p, f, 0.0).unwrap()
    }

    #[test]
    fn inner_grad_identity_curvature() {
        let a = DenseMatrix::identity(2);
        let b = DenseMatrix::zeros(2, 1);
        let p = quadratic_without_u_terms(a, b, Vector::zeros(2), DenseMatrix::identity(2), Vector::zeros(2), 0.0)
            .unwrap();
        let g = p.inner_grad(&Vector::zeros(1), &Vector::from_slice(&[1.0, 2.0])).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn inner_grad_vanishes_at_stationary_point() {
        let p = simple_problem();
        let u = Vector::from_slice(&[3.0]);
        let w = p.inner_min_displacement(&u, &Vector::zeros(2)).unwrap();
        let g = p.inner_grad(&u, &w).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn min_displacement_keeps_null_component() {
        // A = diag(1,0), Bu + d = (1,0), w0 = (0,5) -> (-1, 5)
        let a = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = DenseMatrix::from_rows(&[&[1.0], &[0.0]]);
        let p = quadratic_without_u_terms(a, b, Vector::zeros(2), DenseMatrix::identity(2), Vector::zeros(2), 0.0)
            .unwrap();
        let w = p
            .inner_min_displacement(&Vector::from_slice(&[1.0]), &Vector::from_slice(&[0.0, 5.0]))
            .unwrap();
        assert!((w[0] + 1.0).abs() < 1e-12);
        assert!((w[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_inner_ignores_w0() {
        let a = DenseMatrix::identity(2);
        let b = DenseMatrix::from_rows(&[&[1.0], &[2.0]]);
        let p = quadratic_without_u_terms(a, b, Vector::zeros(2), DenseMatrix::identity(2), Vector::zeros(2), 0.0)
            .unwrap();
        let u = Vector::from_slice(&[1.0]);
        let w1 = p.inner_min_displacement(&u, &Vector::zeros(2)).unwrap();
        let w2 = p.inner_min_displacement(&u, &Vector::from_slice(&[7.0, -3.0])).unwrap();
        assert!(w1.sub(&w2).norm() < 1e-12);
        assert!(w1.sub(&Vector::from_slice(&[-1.0, -2.0])).norm() < 1e-12);
    }

    #[test]
    fn solution_set_shapes() {
        let p = simple_problem();
        let set = p.solution_set(&Vector::from_slice(&[1.0]), 1e-10).unwrap();
        assert_eq!(set.nullspace_basis.cols(), 1);
        assert!((set.nullspace_basis.get(1, 0).abs() - 1.0).abs() < 1e-12);

        let full = quadratic_without_u_terms(
            DenseMatrix::identity(2),
            DenseMatrix::zeros(2, 1),
            Vector::zeros(2),
            DenseMatrix::identity(2),
            Vector::zeros(2),
            0.0,
        )
        .unwrap();
        assert_eq!(full.solution_set(&Vector::zeros(1), 1e-10).unwrap().nullspace_basis.cols(), 0);

        let zero = quadratic_without_u_terms(
            DenseMatrix::zeros(2, 2),
            DenseMatrix::zeros(2, 1),
            Vector::zeros(2),
            DenseMatrix::identity(2),
            Vector::zeros(2),
            0.0,
        )
        .unwrap();
        let set = zero.solution_set(&Vector::zeros(1), 1e-10).unwrap();
        assert_eq!(set.nullspace_basis.cols(), 2);
        assert!(set.particular.norm() < 1e-12);
    }

    #[test]
    fn reduce_outer_trivial_cases() {
        // B = 0 -> constant reduced objective.
        let p = quadratic_without_u_terms(
            DenseMatrix::identity(2),
            DenseMatrix::zeros(2, 2),
            Vector::zeros(2),
            DenseMatrix::identity(2),
            Vector::zeros(2),
            0.0,
        )
        .unwrap();
        let r = p.reduce_outer().unwrap();
        assert_eq!(r.z.max_abs(), 0.0);
        assert_eq!(r.linear.max_abs(), 0.0);

        // A = I, P = I, d = 0, f = 0 -> Z = BᵀB.
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let p = quadratic_without_u_terms(
            DenseMatrix::identity(2),
            b.clone(),
            Vector::zeros(2),
            DenseMatrix::identity(2),
            Vector::zeros(2),
            0.0,
        )
        .unwrap();
        let r = p.reduce_outer().unwrap();
        assert!(r.z.sub(&b.transpose().matmul(&b)).max_abs() < 1e-12);
    }

    #[test]
    fn cold_oracle_constant_objective_returns_u0() {
        let p = quadratic_without_u_terms(
            DenseMatrix::identity(2),
            DenseMatrix::zeros(2, 2),
            Vector::zeros(2),
            DenseMatrix::identity(2),
            Vector::zeros(2),
            0.0,
        )
        .unwrap();
        let u0 = Vector::from_slice(&[3.0, -1.0]);
        let u = p.cold_start_outer_oracle(&u0).unwrap();
        assert!(u.sub(&u0).norm() < 1e-12);
    }

    #[test]
    fn unbounded_inner_is_rejected() {
        // d has a component outside range(A) = span(e1).
        let a = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = DenseMatrix::zeros(2, 1);
        let d = Vector::from_slice(&[0.0, 1.0]);
        let err = quadratic_without_u_terms(a, b, d, DenseMatrix::identity(2), Vector::zeros(2), 0.0);
        assert!(matches!(err, Err(QuadraticError::UnboundedInner { .. })));
    }

    #[test]
    fn rejects_indefinite_curvature() {
        let a = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        let err = quadratic_without_u_terms(
            a,
            DenseMatrix::zeros(2, 1),
            Vector::zeros(2),
            DenseMatrix::identity(2),
            Vector::zeros(2),
            0.0,
        );
        assert!(matches!(err, Err(QuadraticError::NotPsd { name: "A", .. })));
    }

    #[test]
    fn toml_fixture_round_trip() {
        let p = simple_problem();
        let text = p.to_toml();
        let q = QuadraticBilevel::from_toml(&text).unwrap();
        assert_eq!(p.data().a, q.data().a);
        assert_eq!(p.data().b, q.data().b);
        let u = Vector::from_slice(&[0.7]);
        let w = Vector::from_slice(&[0.3, -0.2]);
        assert_eq!(p.inner_value(&u, &w), q.inner_value(&u, &w));
    }
}
