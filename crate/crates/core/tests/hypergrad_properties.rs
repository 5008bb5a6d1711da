//! Identities among the hypergradient engines: unrolling vs the Neumann
//! series on quadratics, the exact method vs the assembled pseudoinverse
//! response, truncated CG vs exact on full-rank systems, the proximal
//! response vs the damped path, and the spectral behavior of the Neumann map.

use blo_core::hypergrad::{
    neumann_eigenvalue_map, proximal_response_jacobian, response_vjp, unrolled_hypergrad_quadratic,
    HypergradMethod,
};
use blo_core::linalg::{pinv, Vector, DEFAULT_RANK_TOL};
use blo_core::quadratic::QuadraticBilevel;
use blo_testkit as tk;
use tk::InstanceShape;

fn stationary_point(p: &QuadraticBilevel, u: &Vector) -> Vector {
    p.inner_min_displacement(u, &Vector::zeros(p.inner_dim())).unwrap()
}

#[test]
fn unroll_equals_neumann_over_the_grid() {
    let mut rng = tk::rng(301);
    for case in 0..12 {
        let shape = InstanceShape {
            inner_dim: 4 + case % 9,
            outer_dim: 2 + case % 4,
            inner_rank: 1 + case % (3 + case % 9),
            outer_rank: 2 + case % 4,
        };
        let p = tk::random_quadratic(&mut rng, shape);
        let u = tk::gaussian_vector(&mut rng, p.outer_dim());
        let w = stationary_point(&p, &u);
        let lam = p.lambda_max_inner();
        for alpha in [0.3 / lam, 1.0 / lam] {
            for k in [0usize, 1, 3, 7, 20] {
                let unrolled = unrolled_hypergrad_quadratic(&p, &u, &w, alpha, k).unwrap();
                let neumann = response_vjp(&p, &u, &w, HypergradMethod::Neumann { terms: k, alpha })
                    .unwrap()
                    .gradient;
                let diff = unrolled.sub(&neumann).max_abs();
                assert!(diff <= 1e-12, "case {case}, alpha {alpha}, k {k}: diff {diff}");
            }
        }
    }
}

#[test]
fn exact_method_reproduces_assembled_pseudoinverse_response() {
    let mut rng = tk::rng(302);
    for case in 0..10 {
        let shape = InstanceShape {
            inner_dim: 5 + case % 8,
            outer_dim: 3,
            inner_rank: 2 + case % 4,
            outer_rank: 3,
        };
        let p = tk::random_quadratic(&mut rng, shape);
        let u = tk::gaussian_vector(&mut rng, p.outer_dim());
        let w = stationary_point(&p, &u);
        let got = response_vjp(&p, &u, &w, HypergradMethod::Exact).unwrap().gradient;
        // assemble -(H⁺ M)ᵀ ∂F/∂w directly
        let hp = pinv(&p.data().a, DEFAULT_RANK_TOL);
        let response = hp.matmul(&p.data().b);
        let v = p.outer_grad_w(&w);
        let expected = response.matvec_transposed(&v).scaled(-1.0);
        assert!(got.sub(&expected).norm() <= 1e-10 * (1.0 + expected.norm()));
    }
}

#[test]
fn truncated_cg_with_full_iterations_matches_exact_on_full_rank() {
    let mut rng = tk::rng(303);
    for _ in 0..8 {
        let shape = InstanceShape { inner_dim: 7, outer_dim: 3, inner_rank: 7, outer_rank: 5 };
        let p = tk::random_quadratic(&mut rng, shape);
        let u = tk::gaussian_vector(&mut rng, 3);
        let w = stationary_point(&p, &u);
        let exact = response_vjp(&p, &u, &w, HypergradMethod::Exact).unwrap().gradient;
        let cg = response_vjp(&p, &u, &w, HypergradMethod::TruncatedCg { steps: 7 })
            .unwrap()
            .gradient;
        assert!(cg.sub(&exact).norm() <= 1e-7 * (1.0 + exact.norm()));
    }
}

#[test]
fn neumann_map_respects_the_spectral_sandwich() {
    // For alpha*lambda in (0, 1] the K-term map sits inside
    // [0, min(1/lambda, alpha(K+1))] and grows as alpha(K+1) on null directions.
    for k in [0usize, 1, 5, 50, 500] {
        for &alpha in &[0.05, 0.3, 1.0] {
            for step in 1..=40 {
                let lam = step as f64 / (40.0 * alpha); // alpha*lam in (0, 1]
                let val = neumann_eigenvalue_map(lam, alpha, k);
                let cap = (1.0 / lam).min(alpha * (k + 1) as f64);
                assert!(val >= 0.0, "negative map value at lam {lam}");
                assert!(val <= cap * (1.0 + 1e-12), "map {val} above cap {cap}");
            }
            assert_eq!(neumann_eigenvalue_map(0.0, alpha, k), alpha * (k + 1) as f64);
        }
    }
}

#[test]
fn neumann_map_approaches_damped_inverse_as_k_grows() {
    // With s = alpha*lambda*K held fixed, the relative gap between the
    // Neumann map and 1/(lambda + 1/(alpha K)) settles onto the limit profile
    // (1 + 1/s)(1 - e^{-s}) - 1, which peaks near 30% around s ≈ 1.8 and
    // vanishes toward both ends. Checked here: the gap decreases in K and
    // stays under the analytic ceiling.
    let alpha = 1.0;
    for &s in &[0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
        let mut last_gap = f64::INFINITY;
        for &k in &[10usize, 100, 1000] {
            let lam = s / (alpha * k as f64);
            let neumann = neumann_eigenvalue_map(lam, alpha, k);
            let damped = 1.0 / (lam + 1.0 / (alpha * k as f64));
            let gap = (neumann - damped).abs() / damped;
            assert!(gap <= last_gap * (1.0 + 1e-9), "gap must shrink with K at s = {s}");
            assert!(gap <= 0.40, "gap {gap} above the finite-K ceiling at s = {s}, K = {k}");
            last_gap = gap;
        }
        let limit = (1.0 + 1.0 / s) * (1.0 - (-s).exp()) - 1.0;
        assert!((last_gap - limit.abs()).abs() <= 0.02, "K = 1000 gap should sit near the limit profile");
    }
}

#[test]
fn proximal_jacobian_equals_damped_response_column_wise() {
    let mut rng = tk::rng(304);
    for case in 0..8 {
        let shape = InstanceShape {
            inner_dim: 6,
            outer_dim: 3,
            inner_rank: 2 + case % 5,
            outer_rank: 4,
        };
        let p = tk::random_quadratic(&mut rng, shape);
        let u = tk::gaussian_vector(&mut rng, 3);
        let w = stationary_point(&p, &u);
        let eps = 10f64.powi(-(1 + (case % 4) as i32));
        let j = proximal_response_jacobian(&p, &u, &w, eps).unwrap();
        let v = p.outer_grad_w(&w);
        // response part of the damped hypergradient: -Mᵀ (H+εI)⁻¹ v = Jᵀ v
        let damped = response_vjp(&p, &u, &w, HypergradMethod::Damped { eps }).unwrap().gradient;
        let via_jacobian = j.matvec_transposed(&v);
        assert!(
            damped.sub(&via_jacobian).max_abs() <= 1e-12 * (1.0 + damped.max_abs()),
            "case {case}: proximal and damped paths disagree"
        );
    }
}

#[test]
fn proximal_jacobian_converges_to_inverse_on_full_rank() {
    let mut rng = tk::rng(305);
    let shape = InstanceShape { inner_dim: 5, outer_dim: 2, inner_rank: 5, outer_rank: 5 };
    let p = tk::random_quadratic(&mut rng, shape);
    let u = tk::gaussian_vector(&mut rng, 2);
    let w = stationary_point(&p, &u);
    let j = proximal_response_jacobian(&p, &u, &w, 1e-8).unwrap();
    // column-wise direct solve oracle for -H⁻¹ M
    for col in 0..2 {
        let m_col = p.data().b.column(col);
        let direct = tk::gauss_solve(&p.data().a, &m_col).scaled(-1.0);
        let got = j.column(col);
        assert!(got.sub(&direct).norm() <= 1e-6 * (1.0 + direct.norm()), "column {col}");
    }
}
