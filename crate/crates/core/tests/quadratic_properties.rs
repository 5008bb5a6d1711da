//! Oracle checks for the quadratic problem class: gradient descent as the
//! ground truth for the minimum-displacement closed forms, finite differences
//! for gradients, and direct evaluation for the reduced outer objective.

use blo_core::linalg::{sym_eig, Vector, DEFAULT_SYM_TOL};
use blo_testkit as tk;
use tk::InstanceShape;

fn shape_cycle(case: usize) -> InstanceShape {
    let inner_dim = 4 + case % 14; // up to 17
    let outer_dim = 2 + case % 5;
    InstanceShape {
        inner_dim,
        outer_dim,
        inner_rank: 1 + case % (inner_dim - 1), // always deficient by at least 1
        outer_rank: 1 + (case / 2) % inner_dim.min(6),
    }
}

#[test]
fn lemma_style_min_displacement_matches_gd_on_100_instances() {
    let mut rng = tk::rng(201);
    for case in 0..100 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let u = tk::gaussian_vector(&mut rng, p.outer_dim());
        let w0 = tk::gaussian_vector(&mut rng, p.inner_dim());
        let lr = 1.0 / p.lambda_max_inner();
        let gd = tk::gd_oracle(
            |w| blo_core::quadratic::QuadraticBilevel::inner_grad(&p, &u, w).unwrap(),
            &w0,
            lr,
            1e-10,
            200_000,
        );
        let closed = p.inner_min_displacement(&u, &w0).unwrap();
        let err = gd.sub(&closed).norm();
        assert!(err <= 1e-6 * (1.0 + w0.norm()), "case {case}: GD vs closed form {err}");
    }
}

#[test]
fn reduced_outer_curvature_is_psd() {
    let mut rng = tk::rng(202);
    for case in 0..30 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let reduced = p.reduce_outer().unwrap();
        let eig = sym_eig(&reduced.z, DEFAULT_SYM_TOL).unwrap();
        let lam_max = eig.lambda_max().max(0.0);
        let lam_min = eig.eigenvalues.last().copied().unwrap_or(0.0);
        assert!(lam_min >= -1e-9 * lam_max.max(1.0), "case {case}: Z has eigenvalue {lam_min}");
    }
}

#[test]
fn inner_objective_is_flat_on_the_solution_set() {
    let mut rng = tk::rng(203);
    for case in 0..20 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let u = tk::gaussian_vector(&mut rng, p.outer_dim());
        let set = p.solution_set(&u, 1e-10).unwrap();
        let base = p.inner_value(&u, &set.particular);
        for trial in 0..4 {
            let mut w = set.particular.clone();
            for col in 0..set.nullspace_basis.cols() {
                let coeff = ((trial + col) as f64 - 1.5) * 0.8;
                w.axpy(coeff, &set.nullspace_basis.column(col));
            }
            let val = p.inner_value(&u, &w);
            assert!(
                (val - base).abs() <= 1e-9 * (1.0 + base.abs()),
                "case {case}: f varies over the solution set ({val} vs {base})"
            );
        }
    }
}

#[test]
fn inner_grad_vanishes_at_min_displacement() {
    let mut rng = tk::rng(204);
    for case in 0..20 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let u = tk::gaussian_vector(&mut rng, p.outer_dim());
        let w0 = tk::gaussian_vector(&mut rng, p.inner_dim());
        let w = p.inner_min_displacement(&u, &w0).unwrap();
        let g = blo_core::quadratic::QuadraticBilevel::inner_grad(&p, &u, &w).unwrap();
        assert!(g.norm() <= 1e-8 * (1.0 + w.norm()));
    }
}

#[test]
fn inner_grad_matches_finite_differences() {
    let mut rng = tk::rng(205);
    for case in 0..10 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let u = tk::gaussian_vector(&mut rng, p.outer_dim());
        let w = tk::gaussian_vector(&mut rng, p.inner_dim());
        let analytic = blo_core::quadratic::QuadraticBilevel::inner_grad(&p, &u, &w).unwrap();
        let fd = tk::fd_gradient(|w_probe| p.inner_value(&u, w_probe), &w, 1e-5);
        assert!(
            analytic.sub(&fd).norm() <= 1e-6 * (1.0 + analytic.norm()),
            "case {case}: FD oracle disagrees"
        );
    }
}

#[test]
fn reduced_outer_agrees_with_direct_evaluation_at_20_points() {
    let mut rng = tk::rng(206);
    for case in 0..10 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let reduced = p.reduce_outer().unwrap();
        let zero_w0 = Vector::zeros(p.inner_dim());
        for _ in 0..20 {
            let u = tk::gaussian_vector(&mut rng, p.outer_dim());
            let w_star = p.inner_min_displacement(&u, &zero_w0).unwrap();
            let direct = p.outer_value(&w_star);
            let via_reduction = reduced.value(&u);
            assert!(
                (direct - via_reduction).abs() <= 1e-9 * (1.0 + direct.abs()),
                "case {case}: F* mismatch ({direct} vs {via_reduction})"
            );
        }
    }
}

#[test]
fn cold_start_oracle_matches_outer_gradient_descent() {
    let mut rng = tk::rng(207);
    for case in 0..10 {
        let p = tk::random_quadratic(&mut rng, shape_cycle(case));
        let reduced = p.reduce_outer().unwrap();
        let lam_max = sym_eig(&reduced.z, DEFAULT_SYM_TOL).unwrap().lambda_max();
        if lam_max <= 0.0 {
            continue; // constant objective: oracle returns u0, trivially consistent
        }
        let u0 = tk::gaussian_vector(&mut rng, p.outer_dim());
        let gd = tk::gd_oracle(|u| reduced.grad(u), &u0, 1.0 / lam_max, 1e-11, 200_000);
        let oracle = p.cold_start_outer_oracle(&u0).unwrap();
        let err = gd.sub(&oracle).norm();
        assert!(err <= 1e-5 * (1.0 + u0.norm()), "case {case}: outer GD vs oracle {err}");
    }
}

#[test]
fn cold_start_oracle_ignores_u0_when_curvature_is_full_rank() {
    let mut rng = tk::rng(208);
    // full-rank Z: make B injective and P full rank, A full rank
    let shape = InstanceShape { inner_dim: 5, outer_dim: 3, inner_rank: 5, outer_rank: 5 };
    let p = tk::random_quadratic(&mut rng, shape);
    let a = p.cold_start_outer_oracle(&Vector::zeros(3)).unwrap();
    let b = p.cold_start_outer_oracle(&tk::gaussian_vector(&mut rng, 3)).unwrap();
    assert!(a.sub(&b).norm() <= 1e-8 * (1.0 + a.norm()));
}
