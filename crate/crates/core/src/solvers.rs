//! Bilevel solver loops (cold-start, full and partial warm-start), inner
//! gradient descent, equilibrium checks, and cyclic hyperplane projection.

use thiserror::Error;

use crate::hypergrad::{response_vjp, BilevelProblem, HypergradError, HypergradMethod};
use crate::linalg::{sym_eig, truncated_cg, DenseMatrix, Vector, DEFAULT_SYM_TOL};
use crate::quadratic::{QuadraticBilevel, QuadraticError};

/// Records stop being dense after this many outer iterations; past it only
/// every tenth iterate is kept so long runs stay plottable without drowning.
const DENSE_TRACE_LIMIT: usize = 100_000;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("inner loss grew by more than 1e6x its initial value; step size too large")]
    DivergenceDetected,
    #[error("inner step cap {cap} reached before tolerance")]
    StepCapReached { cap: usize, best: Vector },
    #[error("non-finite loss encountered at outer iteration {iter}")]
    NonFiniteLoss { iter: usize, trace: Box<SolveTrace> },
    #[error("hyperplane direction has zero norm")]
    ZeroDirection,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hypergrad(#[from] HypergradError),
    #[error(transparent)]
    Quadratic(#[from] QuadraticError),
}

/// How the inner problem is treated across outer iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Re-optimize from `w0` to tolerance at every outer step.
    ColdStart,
    /// Optimize from the previous inner iterate to tolerance.
    WarmStartFull,
    /// Take exactly `t_inner` gradient steps from the previous iterate.
    WarmStartPartial { t_inner: usize },
}

#[derive(Debug, Clone)]
pub struct BilevelConfig {
    pub mode: SolveMode,
    /// Inner learning rate; also the Neumann/unroll step size by convention.
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub max_outer_iters: usize,
    /// Relative gradient-norm tolerance declaring the inner problem solved.
    pub inner_tol: f64,
    /// Cap on inner gradient steps per to-tolerance optimization.
    pub inner_step_cap: usize,
    pub method: HypergradMethod,
    /// Outer stop once the hypergradient norm falls to or below this.
    pub outer_stop_tol: f64,
    pub w0: Vector,
    pub u0: Vector,
}

impl BilevelConfig {
    /// Sensible defaults for a quadratic problem: step sizes from the
    /// curvature spectra, tight tolerances, exact hypergradients.
    pub fn for_quadratic(problem: &QuadraticBilevel) -> Result<Self, SolverError> {
        let lam_a = problem.lambda_max_inner();
        let reduced = problem.reduce_outer()?;
        let lam_z = sym_eig(&reduced.z, DEFAULT_SYM_TOL)
            .map_err(HypergradError::from)?
            .lambda_max();
        Ok(Self {
            mode: SolveMode::ColdStart,
            inner_lr: if lam_a > 0.0 { 1.0 / lam_a } else { 1.0 },
            outer_lr: if lam_z > 0.0 { 1.0 / lam_z } else { 1.0 },
            max_outer_iters: 10_000,
            inner_tol: 1e-8,
            inner_step_cap: 1_000_000,
            method: HypergradMethod::Exact,
            outer_stop_tol: 1e-8,
            w0: Vector::zeros(problem.inner_dim()),
            u0: Vector::zeros(problem.outer_dim()),
        })
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.inner_lr > 0.0) {
            return Err(SolverError::InvalidConfig("inner_lr must be positive".into()));
        }
        if !(self.outer_lr > 0.0) {
            return Err(SolverError::InvalidConfig("outer_lr must be positive".into()));
        }
        if self.inner_tol < 0.0 || self.outer_stop_tol < 0.0 {
            return Err(SolverError::InvalidConfig("tolerances must be non-negative".into()));
        }
        if let SolveMode::WarmStartPartial { t_inner } = self.mode {
            if t_inner == 0 {
                return Err(SolverError::InvalidConfig("t_inner must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iter: usize,
    pub u: Vector,
    pub w: Vector,
    pub outer_loss: f64,
    pub inner_loss: f64,
    pub hypergrad_norm: f64,
    /// Inner gradient norm at the point the hypergradient was taken.
    pub stationarity: f64,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
    pub status: SolveStatus,
}

impl SolveTrace {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace has at least one record")
    }

    /// CSV with header `iter,outer_loss,inner_loss,hypergrad_norm,stationarity`
    /// plus one `u_i` column per outer coordinate when requested.
    pub fn to_csv(&self, include_u: bool) -> String {
        let mut out = String::from("iter,outer_loss,inner_loss,hypergrad_norm,stationarity");
        if include_u {
            if let Some(first) = self.records.first() {
                for i in 0..first.u.len() {
                    out.push_str(&format!(",u_{i}"));
                }
            }
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.iter,
                format_float17(r.outer_loss),
                format_float17(r.inner_loss),
                format_float17(r.hypergrad_norm),
                format_float17(r.stationarity)
            ));
            if include_u {
                for x in r.u.as_slice() {
                    out.push(',');
                    out.push_str(&format_float17(*x));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Formats with 17 significant digits, enough for exact `f64` round-trips.
pub fn format_float17(x: f64) -> String {
    format!("{x:.16e}")
}

fn should_record(iter: usize) -> bool {
    iter < DENSE_TRACE_LIMIT || iter % 10 == 0
}

/// Runs `steps` fixed-step gradient descent updates on the inner objective.
pub fn optimize_inner(
    problem: &dyn BilevelProblem,
    u: &Vector,
    w_init: &Vector,
    steps: usize,
    gamma: f64,
) -> Result<Vector, SolverError> {
    if !(gamma > 0.0) {
        return Err(SolverError::InvalidConfig("gamma must be positive".into()));
    }
    let mut w = w_init.clone();
    let initial_loss = problem.inner_loss(u, &w);
    let blowup = 1e6 * (initial_loss.abs() + 1.0);
    for _ in 0..steps {
        let g = problem.inner_grad(u, &w);
        w.axpy(-gamma, &g);
        let loss = problem.inner_loss(u, &w);
        if !loss.is_finite() || loss > blowup {
            return Err(SolverError::DivergenceDetected);
        }
    }
    Ok(w)
}

/// Gradient descent until `|∇_w f| ≤ tol · (1 + |w|)`, up to `step_cap` steps.
pub fn optimize_inner_to_tol(
    problem: &dyn BilevelProblem,
    u: &Vector,
    w_init: &Vector,
    tol: f64,
    gamma: f64,
    step_cap: usize,
) -> Result<Vector, SolverError> {
    if !(gamma > 0.0) {
        return Err(SolverError::InvalidConfig("gamma must be positive".into()));
    }
    let mut w = w_init.clone();
    let initial_loss = problem.inner_loss(u, &w);
    let blowup = 1e6 * (initial_loss.abs() + 1.0);
    for _ in 0..step_cap {
        let g = problem.inner_grad(u, &w);
        if g.norm() <= tol * (1.0 + w.norm()) {
            return Ok(w);
        }
        w.axpy(-gamma, &g);
        let loss = problem.inner_loss(u, &w);
        if !loss.is_finite() || loss > blowup {
            return Err(SolverError::DivergenceDetected);
        }
    }
    if problem.inner_grad(u, &w).norm() <= tol * (1.0 + w.norm()) {
        return Ok(w);
    }
    Err(SolverError::StepCapReached { cap: step_cap, best: w })
}

/// Runs the bilevel loop with literal gradient-descent inner optimization.
///
/// Per outer iteration: bring the inner parameters to the state the mode
/// dictates, evaluate the hypergradient there, record, then update the outer
/// parameters. Stops when the hypergradient norm reaches `outer_stop_tol`.
pub fn run_bilevel(
    problem: &dyn BilevelProblem,
    config: &BilevelConfig,
) -> Result<SolveTrace, SolverError> {
    config.validate()?;
    let mut records = Vec::new();
    let mut u = config.u0.clone();
    let mut w = config.w0.clone();

    for iter in 0..=config.max_outer_iters {
        w = match config.mode {
            SolveMode::ColdStart => optimize_inner_to_tol(
                problem,
                &u,
                &config.w0,
                config.inner_tol,
                config.inner_lr,
                config.inner_step_cap,
            )?,
            SolveMode::WarmStartFull => optimize_inner_to_tol(
                problem,
                &u,
                &w,
                config.inner_tol,
                config.inner_lr,
                config.inner_step_cap,
            )?,
            SolveMode::WarmStartPartial { t_inner } => {
                optimize_inner(problem, &u, &w, t_inner, config.inner_lr)?
            }
        };
        let hg = response_vjp(problem, &u, &w, config.method)?;
        let outer_loss = problem.outer_loss(&u, &w);
        let inner_loss = problem.inner_loss(&u, &w);
        let hypergrad_norm = hg.gradient.norm();
        let stationarity = problem.inner_grad(&u, &w).norm();
        if should_record(iter) || iter == config.max_outer_iters || hypergrad_norm <= config.outer_stop_tol {
            records.push(TraceRecord {
                iter,
                u: u.clone(),
                w: w.clone(),
                outer_loss,
                inner_loss,
                hypergrad_norm,
                stationarity,
            });
        }
        if !outer_loss.is_finite() || !inner_loss.is_finite() {
            return Err(SolverError::NonFiniteLoss {
                iter,
                trace: Box::new(SolveTrace { records, status: SolveStatus::MaxIters }),
            });
        }
        if hypergrad_norm <= config.outer_stop_tol {
            return Ok(SolveTrace { records, status: SolveStatus::Converged });
        }
        if iter == config.max_outer_iters {
            break;
        }
        u.axpy(-config.outer_lr, &hg.gradient);
    }
    Ok(SolveTrace { records, status: SolveStatus::MaxIters })
}

/// Bilevel loop specialized to quadratics: to-tolerance inner optimization is
/// replaced by the closed-form minimum-displacement solution, and the
/// response operator of the chosen method is materialized once. `trace_every`
/// thins the recording (1 keeps everything; the final iterate is always kept).
pub fn run_bilevel_quadratic(
    problem: &QuadraticBilevel,
    config: &BilevelConfig,
    trace_every: usize,
) -> Result<SolveTrace, SolverError> {
    config.validate()?;
    let every = trace_every.max(1);
    let b = &problem.data().b;

    // Response operator applied to ∂F/∂w each iteration; CG re-solves per
    // iterate instead of materializing anything.
    enum Responder {
        Matrix(DenseMatrix),
        Cg(usize),
        Identity,
    }
    let eig = problem.a_eig();
    let lam_max = problem.lambda_max_inner();
    let responder = match config.method {
        HypergradMethod::Exact => Responder::Matrix(problem.a_pinv().clone()),
        HypergradMethod::Neumann { terms, alpha } | HypergradMethod::Unroll { steps: terms, alpha } => {
            if alpha * lam_max >= 2.0 {
                return Err(HypergradError::SeriesDivergence(alpha * lam_max).into());
            }
            Responder::Matrix(eig.spectral_map_matrix(|l| {
                crate::hypergrad::neumann_eigenvalue_map(l, alpha, terms)
            }))
        }
        HypergradMethod::Damped { eps } => {
            if eps <= 0.0 {
                return Err(HypergradError::NonPositiveDamping(eps).into());
            }
            Responder::Matrix(eig.spectral_map_matrix(|l| 1.0 / (l + eps)))
        }
        HypergradMethod::TruncatedCg { steps } => Responder::Cg(steps),
        HypergradMethod::Identity => Responder::Identity,
    };

    let mut records = Vec::new();
    let mut u = config.u0.clone();
    let mut w = config.w0.clone();
    for iter in 0..=config.max_outer_iters {
        w = match config.mode {
            SolveMode::ColdStart => problem.inner_min_displacement(&u, &config.w0)?,
            SolveMode::WarmStartFull => problem.inner_min_displacement(&u, &w)?,
            SolveMode::WarmStartPartial { t_inner } => {
                optimize_inner(problem, &u, &w, t_inner, config.inner_lr)?
            }
        };
        let v = problem.outer_grad_w(&w);
        let applied = match &responder {
            Responder::Matrix(r) => r.matvec(&v),
            Responder::Cg(steps) => {
                truncated_cg(&problem.data().a, &v, *steps).map_err(HypergradError::from)?.solution
            }
            Responder::Identity => v.clone(),
        };
        let g = b.matvec_transposed(&applied).scaled(-1.0);
        let hypergrad_norm = g.norm();
        let outer_loss = problem.outer_value(&w);
        let converged = hypergrad_norm <= config.outer_stop_tol;
        if iter % every == 0 || iter == config.max_outer_iters || converged {
            records.push(TraceRecord {
                iter,
                u: u.clone(),
                w: w.clone(),
                outer_loss,
                inner_loss: problem.inner_value(&u, &w),
                hypergrad_norm,
                stationarity: QuadraticBilevel::inner_grad(problem, &u, &w)?.norm(),
            });
        }
        if !outer_loss.is_finite() {
            return Err(SolverError::NonFiniteLoss {
                iter,
                trace: Box::new(SolveTrace { records, status: SolveStatus::MaxIters }),
            });
        }
        if converged {
            return Ok(SolveTrace { records, status: SolveStatus::Converged });
        }
        if iter == config.max_outer_iters {
            break;
        }
        u.axpy(-config.outer_lr, &g);
    }
    Ok(SolveTrace { records, status: SolveStatus::MaxIters })
}

/// Residuals certifying a cold-start equilibrium: distance of `w` from the
/// minimum-displacement solution at `u`, and the exact hypergradient norm.
#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub inner_residual: f64,
    pub hypergrad_norm: f64,
    pub tol: f64,
}

impl EquilibriumReport {
    pub fn passes(&self) -> bool {
        self.inner_residual <= self.tol && self.hypergrad_norm <= self.tol
    }
}

pub fn check_cold_equilibrium(
    problem: &QuadraticBilevel,
    u: &Vector,
    w: &Vector,
    w0: &Vector,
    tol: f64,
) -> Result<EquilibriumReport, SolverError> {
    let w_star = problem.inner_min_displacement(u, w0)?;
    let inner_residual = w.sub(&w_star).norm();
    let hg = response_vjp(problem, u, w, HypergradMethod::Exact)?;
    Ok(EquilibriumReport { inner_residual, hypergrad_norm: hg.gradient.norm(), tol })
}

/// Warm-start equilibrium check: `w` must be a fixpoint of `t_inner` gradient
/// steps at `u`, and the exact hypergradient must vanish.
pub fn check_warm_equilibrium(
    problem: &dyn BilevelProblem,
    u: &Vector,
    w: &Vector,
    t_inner: usize,
    alpha: f64,
    tol: f64,
) -> Result<EquilibriumReport, SolverError> {
    let stepped = optimize_inner(problem, u, w, t_inner, alpha)?;
    let inner_residual = stepped.sub(w).norm();
    let hg = response_vjp(problem, u, w, HypergradMethod::Exact)?;
    Ok(EquilibriumReport { inner_residual, hypergrad_norm: hg.gradient.norm(), tol })
}

/// A hyperplane `xᵀw = y` in homogeneous coordinates.
#[derive(Debug, Clone)]
pub struct Hyperplane {
    x: Vector,
    y: f64,
}

impl Hyperplane {
    pub fn new(x: Vector, y: f64) -> Result<Self, SolverError> {
        if x.norm() == 0.0 {
            return Err(SolverError::ZeroDirection);
        }
        Ok(Self { x, y })
    }

    pub fn direction(&self) -> &Vector {
        &self.x
    }

    pub fn target(&self) -> f64 {
        self.y
    }

    pub fn residual(&self, w: &Vector) -> f64 {
        self.x.dot(w) - self.y
    }
}

/// Orthogonal projection of `w0` onto the hyperplane:
/// `w0 - (xᵀw0 - y)/(xᵀx) · x`.
pub fn kaczmarz_project(w0: &Vector, plane: &Hyperplane) -> Vector {
    let correction = plane.residual(w0) / plane.x.dot(&plane.x);
    let mut w = w0.clone();
    w.axpy(-correction, &plane.x);
    w
}

/// Cycles through the hyperplanes `sweeps` times, projecting sequentially.
/// The returned trajectory starts at `w0` and contains every post-projection
/// iterate in order.
pub fn kaczmarz_cycle(
    w0: &Vector,
    planes: &[Hyperplane],
    sweeps: usize,
) -> Vec<Vector> {
    let mut trajectory = Vec::with_capacity(1 + planes.len() * sweeps);
    trajectory.push(w0.clone());
    let mut w = w0.clone();
    for _ in 0..sweeps {
        for plane in planes {
            w = kaczmarz_project(&w, plane);
            trajectory.push(w.clone());
        }
    }
    trajectory
}
