//! Hypergradient approximation engines.
//!
//! All engines share one orientation convention: `mixed(u, w)` is
//! `∂²f/∂w∂u` with shape `|W|x|U|`, the response Jacobian is
//! `∂w*/∂u = -(approximate inverse Hessian)·mixed`, and the hypergradient is
//! `∂F/∂u + (∂w*/∂u)ᵀ ∂F/∂w`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::{solve_damped, sym_eig, truncated_cg, DenseMatrix, LinalgError, Vector};
use crate::linalg::{DEFAULT_RANK_TOL, DEFAULT_SYM_TOL};

#[derive(Debug, Error)]
pub enum HypergradError {
    #[error("Neumann series diverges: alpha * lambda_max = {0:.3e} >= 2")]
    SeriesDivergence(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("damping factor must be positive, got {0}")]
    NonPositiveDamping(f64),
    #[error("inner parameters are not stationary: |grad| = {grad_norm:.3e} > {tol:.3e}")]
    NotStationary { grad_norm: f64, tol: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("cannot parse method spec '{0}'")]
    BadMethodSpec(String),
}

/// First- and second-order oracles a problem must expose for implicit
/// differentiation. The Hessian and mixed blocks are materialized, which is
/// fine for every problem this workspace feeds through here.
pub trait BilevelProblem {
    fn inner_dim(&self) -> usize;
    fn outer_dim(&self) -> usize;
    fn inner_loss(&self, u: &Vector, w: &Vector) -> f64;
    fn outer_loss(&self, u: &Vector, w: &Vector) -> f64;
    /// `∇_w f(u, w)`.
    fn inner_grad(&self, u: &Vector, w: &Vector) -> Vector;
    /// `∂²f/∂w∂wᵀ`, symmetric `|W|x|W|`.
    fn inner_hess(&self, u: &Vector, w: &Vector) -> DenseMatrix;
    /// `∂²f/∂w∂u`, `|W|x|U|`.
    fn mixed(&self, u: &Vector, w: &Vector) -> DenseMatrix;
    /// `∂F/∂w`.
    fn outer_grad_w(&self, u: &Vector, w: &Vector) -> Vector;
    /// `∂F/∂u`; zero for every problem in scope, provided for the general contract.
    fn outer_grad_u(&self, _u: &Vector, _w: &Vector) -> Vector {
        Vector::zeros(self.outer_dim())
    }
}

/// Choice of approximate inverse Hessian in the implicit hypergradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HypergradMethod {
    /// Moore-Penrose pseudoinverse `H⁺` (the exact, min-norm response).
    Exact,
    /// `alpha * Σ_{j=0..terms} (I - alpha·H)^j`.
    Neumann { terms: usize, alpha: f64 },
    /// `(H + eps·I)⁻¹`.
    Damped { eps: f64 },
    /// Differentiation through `steps` inner gradient-descent steps.
    Unroll { steps: usize, alpha: f64 },
    /// `steps` conjugate gradient iterations against `H`.
    TruncatedCg { steps: usize },
    /// The identity in place of the inverse Hessian (factor exactly 1).
    Identity,
}

impl fmt::Display for HypergradMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HypergradMethod::Exact => write!(f, "exact"),
            HypergradMethod::Neumann { terms, alpha } => write!(f, "neumann:{terms}:{alpha:e}"),
            HypergradMethod::Damped { eps } => write!(f, "damped:{eps:e}"),
            HypergradMethod::Unroll { steps, alpha } => write!(f, "unroll:{steps}:{alpha:e}"),
            HypergradMethod::TruncatedCg { steps } => write!(f, "cg:{steps}"),
            HypergradMethod::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for HypergradMethod {
    type Err = HypergradError;

    /// Parses `exact`, `neumann:K:alpha`, `damped:eps`, `unroll:K:alpha`,
    /// `cg:K`, or `identity`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HypergradError::BadMethodSpec(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["exact"] => Ok(Self::Exact),
            ["identity"] => Ok(Self::Identity),
            ["neumann", k, a] => Ok(Self::Neumann {
                terms: k.parse().map_err(|_| bad())?,
                alpha: a.parse().map_err(|_| bad())?,
            }),
            ["unroll", k, a] => Ok(Self::Unroll {
                steps: k.parse().map_err(|_| bad())?,
                alpha: a.parse().map_err(|_| bad())?,
            }),
            ["damped", e] => Ok(Self::Damped { eps: e.parse().map_err(|_| bad())? }),
            ["cg", k] => Ok(Self::TruncatedCg { steps: k.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

/// A hypergradient together with diagnostics about how it was obtained.
#[derive(Debug, Clone)]
pub struct Hypergradient {
    pub gradient: Vector,
    /// The inner gradient norm exceeded the stationarity tolerance at the
    /// evaluation point. Warm-start runs trip this by design.
    pub nonstationary: bool,
    /// Truncated CG hit a non-positive-curvature direction.
    pub cg_breakdown: bool,
}

/// Default stationarity tolerance: `1e-6 * (1 + |w|)`.
pub fn stationarity_tol(w: &Vector) -> f64 {
    1e-6 * (1.0 + w.norm())
}

/// Scalar eigenvalue map of the truncated Neumann series:
/// `alpha * Σ_{j=0..k} (1 - alpha·λ)^j`, i.e. `(1 - (1-αλ)^{k+1})/λ` for
/// `λ ≠ 0` and `α(k+1)` at `λ = 0` (the null-direction growth is kept as is).
pub fn neumann_eigenvalue_map(lambda: f64, alpha: f64, k: usize) -> f64 {
    if lambda == 0.0 {
        alpha * (k + 1) as f64
    } else {
        (1.0 - (1.0 - alpha * lambda).powi(k as i32 + 1)) / lambda
    }
}

/// Materializes `alpha * Σ_{j=0..k} (I - alpha·H)^j` spectrally.
pub fn neumann_matrix(h: &DenseMatrix, alpha: f64, k: usize) -> Result<DenseMatrix, HypergradError> {
    let eig = sym_eig(h, DEFAULT_SYM_TOL)?;
    check_series_converges(alpha, eig.lambda_max())?;
    Ok(eig.spectral_map_matrix(|lam| neumann_eigenvalue_map(lam, alpha, k)))
}

fn check_series_converges(alpha: f64, lambda_max: f64) -> Result<(), HypergradError> {
    let margin = alpha * lambda_max;
    if margin >= 2.0 {
        return Err(HypergradError::SeriesDivergence(margin));
    }
    Ok(())
}

/// Computes the hypergradient `∂F/∂u - Mᵀ·(approximate inverse)·∂F/∂w`
/// at the given `(u, w)` with the chosen method.
///
/// Non-stationary `w` is flagged in the result rather than rejected; the
/// warm-start algorithms rely on evaluating here regardless.
pub fn response_vjp(
    problem: &dyn BilevelProblem,
    u: &Vector,
    w: &Vector,
    method: HypergradMethod,
) -> Result<Hypergradient, HypergradError> {
    if u.len() != problem.outer_dim() || w.len() != problem.inner_dim() {
        return Err(HypergradError::DimensionMismatch(format!(
            "u has length {} (want {}), w has length {} (want {})",
            u.len(),
            problem.outer_dim(),
            w.len(),
            problem.inner_dim()
        )));
    }
    let grad_norm = problem.inner_grad(u, w).norm();
    let nonstationary = grad_norm > stationarity_tol(w);

    let v = problem.outer_grad_w(u, w);
    let mut cg_breakdown = false;
    let applied = match method {
        HypergradMethod::Exact => {
            let eig = sym_eig(&problem.inner_hess(u, w), DEFAULT_SYM_TOL)?;
            let cutoff = DEFAULT_RANK_TOL * eig.lambda_max().abs();
            eig.apply_spectral_map(|l| if l.abs() > cutoff { 1.0 / l } else { 0.0 }, &v)
        }
        HypergradMethod::Neumann { terms, alpha } => {
            let eig = sym_eig(&problem.inner_hess(u, w), DEFAULT_SYM_TOL)?;
            check_series_converges(alpha, eig.lambda_max())?;
            eig.apply_spectral_map(|l| neumann_eigenvalue_map(l, alpha, terms), &v)
        }
        HypergradMethod::Damped { eps } => {
            if eps <= 0.0 {
                return Err(HypergradError::NonPositiveDamping(eps));
            }
            solve_damped(&problem.inner_hess(u, w), eps, &v)?
        }
        HypergradMethod::Unroll { steps, alpha } => {
            let h = problem.inner_hess(u, w);
            let eig = sym_eig(&h, DEFAULT_SYM_TOL)?;
            check_series_converges(alpha, eig.lambda_max())?;
            unroll_series_apply(&h, alpha, steps, &v)
        }
        HypergradMethod::TruncatedCg { steps } => {
            let solve = truncated_cg(&problem.inner_hess(u, w), &v, steps)?;
            cg_breakdown = solve.breakdown;
            solve.solution
        }
        HypergradMethod::Identity => v,
    };

    let mut gradient = problem.outer_grad_u(u, w);
    gradient.axpy(-1.0, &problem.mixed(u, w).matvec_transposed(&applied));
    Ok(Hypergradient { gradient, nonstationary, cg_breakdown })
}

/// Applies `alpha * Σ_{j=0..k} (I - alpha·H)^j` to `v` by the matrix-power
/// recurrence. This is the route unrolled differentiation takes, kept
/// independent from the spectral path so the two can be checked against each
/// other.
fn unroll_series_apply(h: &DenseMatrix, alpha: f64, k: usize, v: &Vector) -> Vector {
    let mut term = v.clone();
    let mut acc = v.clone();
    for _ in 0..k {
        // term <- (I - alpha H) term
        let ht = h.matvec(&term);
        term.axpy(-alpha, &ht);
        acc.axpy(1.0, &term);
    }
    acc.scaled(alpha)
}

/// Response Jacobian of the proximally regularized inner problem:
/// `∂w*/∂u = -(H + eps·I)⁻¹ M`, shape `|W|x|U|`.
pub fn proximal_response_jacobian(
    problem: &dyn BilevelProblem,
    u: &Vector,
    w: &Vector,
    eps: f64,
) -> Result<DenseMatrix, HypergradError> {
    if eps <= 0.0 {
        return Err(HypergradError::NonPositiveDamping(eps));
    }
    let h = problem.inner_hess(u, w);
    let eig = sym_eig(&h, DEFAULT_SYM_TOL)?;
    let damped_inv = eig.spectral_map_matrix(|l| 1.0 / (l + eps));
    Ok(damped_inv.matmul(&problem.mixed(u, w)).scaled(-1.0))
}

/// Hypergradient obtained by differentiating through `k` gradient-descent
/// steps started at a stationary point of a quadratic inner problem. The
/// iterates do not move, so the unroll telescopes to the truncated Neumann
/// series applied by the power recurrence.
pub fn unrolled_hypergrad_quadratic(
    problem: &crate::quadratic::QuadraticBilevel,
    u: &Vector,
    w_star: &Vector,
    alpha: f64,
    k: usize,
) -> Result<Vector, HypergradError> {
    let grad = problem
        .inner_grad(u, w_star)
        .map_err(|e| HypergradError::DimensionMismatch(e.to_string()))?;
    let tol = 1e-8 * (1.0 + w_star.norm());
    if grad.norm() > tol {
        return Err(HypergradError::NotStationary { grad_norm: grad.norm(), tol });
    }
    check_series_converges(alpha, problem.lambda_max_inner())?;
    let h = problem.data().a.clone();
    let v = problem.outer_grad_w(w_star);
    let applied = unroll_series_apply(&h, alpha, k, &v);
    let mut gradient = Vector::zeros(problem.outer_dim());
    gradient.axpy(-1.0, &problem.data().b.matvec_transposed(&applied));
    Ok(gradient)
}
