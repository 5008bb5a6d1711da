//! Core engines for studying how algorithmic choices bias the solutions of
//! nested (bilevel) optimization problems: a small dense linear algebra
//! layer, the convex-quadratic problem class with its closed-form solutions,
//! a family of approximate hypergradient engines, the cold/warm-start solver
//! loops, and hand-differentiated MLPs for the non-quadratic experiments.

pub mod hypergrad;
pub mod linalg;
pub mod mlp;
pub mod quadratic;
pub mod solvers;

pub use hypergrad::{BilevelProblem, Hypergradient, HypergradError, HypergradMethod};
pub use linalg::{DenseMatrix, EigenDecomposition, LinalgError, Vector};
pub use quadratic::{QuadraticBilevel, QuadraticBilevelData, QuadraticError};
pub use solvers::{BilevelConfig, SolveMode, SolveStatus, SolveTrace, SolverError};
