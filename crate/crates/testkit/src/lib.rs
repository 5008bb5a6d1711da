//! Test support shared across the workspace: seeded random problem instances
//! whose spectra are controlled by construction, independent numeric oracles
//! (Gaussian elimination, plain gradient descent, finite differences), and a
//! deterministic image-classification fixture in IDX format.
//!
//! Nothing in here reuses the solver or spectral code paths it is meant to
//! check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use blo_core::linalg::{DenseMatrix, Vector};
use blo_core::quadratic::{QuadraticBilevel, QuadraticBilevelData};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_slice(&(0..n).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>())
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
        .unwrap()
}

/// Random orthonormal basis of R^n via modified Gram-Schmidt on a Gaussian
/// matrix (redrawing on near-degenerate columns, which is measure-zero).
pub fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
    let mut cols: Vec<Vector> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = gaussian_vector(rng, n);
        for c in &cols {
            let proj = v.dot(c);
            v.axpy(-proj, c);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v.scaled(1.0 / norm));
        }
    }
    let mut m = DenseMatrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            m.set(i, j, c[i]);
        }
    }
    m
}

/// Symmetric PSD matrix with exactly the given eigenvalues (in some order)
/// against a random orthonormal basis.
pub fn psd_with_spectrum(rng: &mut ChaCha8Rng, eigenvalues: &[f64]) -> DenseMatrix {
    let n = eigenvalues.len();
    let q = random_orthonormal(rng, n);
    let mut m = DenseMatrix::zeros(n, n);
    for (k, &lam) in eigenvalues.iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        for i in 0..n {
            let qik = q.get(i, k) * lam;
            for j in 0..n {
                m.set(i, j, m.get(i, j) + qik * q.get(j, k));
            }
        }
    }
    // exact symmetry regardless of accumulation order
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
    m
}

/// Spectrum of `rank` values drawn uniformly from `[0.5, 2]`, padded with
/// exact zeros. Keeps gradient-descent oracles fast and well-conditioned.
pub fn bounded_spectrum(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> Vec<f64> {
    let mut eig: Vec<f64> = (0..n)
        .map(|i| if i < rank { rng.random_range(0.5..2.0) } else { 0.0 })
        .collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

/// Shape of a random quadratic bilevel instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub inner_dim: usize,
    pub outer_dim: usize,
    /// Rank of the inner curvature `A` (deficiency is exact by construction).
    pub inner_rank: usize,
    /// Rank of the outer curvature `P`.
    pub outer_rank: usize,
}

/// Random instance satisfying the quadratic problem class by construction:
/// `A` and `P` are PSD with spectra in `[0.5, 2]`, the columns of `B` and the
/// vector `d` are projected into range(A) so the inner problem stays
/// lower-bounded for every `u`, and `f` lies in range(P) so the reduced outer
/// problem has a minimizer.
pub fn random_quadratic(rng: &mut ChaCha8Rng, shape: InstanceShape) -> QuadraticBilevel {
    let (nw, nu) = (shape.inner_dim, shape.outer_dim);
    let a_spectrum = bounded_spectrum(rng, nw, shape.inner_rank);
    let a = psd_with_spectrum(rng, &a_spectrum);
    let p_spectrum = bounded_spectrum(rng, nw, shape.outer_rank);
    let p = psd_with_spectrum(rng, &p_spectrum);

    // Push B's columns and d through A so they land in range(A); rescale to
    // keep entries O(1).
    let b_raw = gaussian_matrix(rng, nw, nu);
    let b = a.matmul(&b_raw).scaled(0.5);
    let d = a.matvec(&gaussian_vector(rng, nw)).scaled(0.5);
    let f = p.matvec(&gaussian_vector(rng, nw)).scaled(0.5);

    QuadraticBilevel::new(QuadraticBilevelData {
        a,
        b,
        c: DenseMatrix::zeros(nu, nu),
        d,
        e: Vector::zeros(nu),
        c_scalar: 0.0,
        p,
        f,
        h_scalar: rng.random_range(-1.0..1.0),
    })
    .expect("instance satisfies the problem class by construction")
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting. Used as an
/// independent oracle for the spectral solve paths. Panics on a singular
/// pivot; callers only feed it well-conditioned systems.
pub fn gauss_solve(a: &DenseMatrix, b: &Vector) -> Vector {
    assert!(a.is_square());
    let n = a.rows();
    assert_eq!(b.len(), n);
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut rhs: Vec<f64> = b.as_slice().to_vec();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        assert!(m[pivot_row][col].abs() > 1e-12, "singular system fed to gauss_solve");
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = m[row][col] / m[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Vector::from_slice(&x)
}

/// Plain fixed-step gradient descent on a closure, run until the gradient
/// norm reaches `tol` or `max_steps` is exhausted. Returns the final iterate.
pub fn gd_oracle(
    grad: impl Fn(&Vector) -> Vector,
    x0: &Vector,
    lr: f64,
    tol: f64,
    max_steps: usize,
) -> Vector {
    let mut x = x0.clone();
    for _ in 0..max_steps {
        let g = grad(&x);
        if g.norm() <= tol {
            break;
        }
        x.axpy(-lr, &g);
    }
    x
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector, step: f64) -> Vector {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let eps = step * (1.0 + x[i].abs());
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        g[i] = (plus - minus) / (2.0 * eps);
    }
    Vector::from_slice(&g)
}

/// Deterministic 10-class image fixture in the IDX container format.
///
/// Each class gets a sparse "ink" prototype (top quintile of smoothed noise);
/// samples are the prototype plus pixel noise, quantized to `u8`. A linear
/// softmax classifier separates the classes easily, which is all the
/// distillation experiments need from their original dataset.
pub mod idx_fixture {
    use super::*;

    pub const SIDE: usize = 28;
    pub const CLASSES: usize = 10;

    pub struct Fixture {
        pub images: Vec<u8>,
        pub labels: Vec<u8>,
        pub count: usize,
    }

    pub fn generate(seed: u64, count: usize) -> Fixture {
        let mut rng = rng(seed);
        let pixels = SIDE * SIDE;
        let mut prototypes = Vec::with_capacity(CLASSES);
        for _ in 0..CLASSES {
            let mut g: Vec<f64> = (0..pixels).map(|_| StandardNormal.sample(&mut rng)).collect();
            for _ in 0..2 {
                g = smooth(&g);
            }
            let mut sorted = g.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let thr = sorted[(0.8 * (pixels - 1) as f64) as usize];
            prototypes.push(g.iter().map(|&v| if v > thr { 1.0 } else { 0.0 }).collect::<Vec<f64>>());
        }
        let mut images = Vec::with_capacity(count * pixels);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.random_range(0..CLASSES);
            labels.push(class as u8);
            for &p in &prototypes[class] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = (p + 0.2 * noise).clamp(0.0, 1.0);
                images.push((v * 255.0).round() as u8);
            }
        }
        Fixture { images, labels, count }
    }

    fn smooth(g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        let s = SIDE as isize;
        for r in 0..s {
            for c in 0..s {
                let at = |rr: isize, cc: isize| {
                    g[((rr.rem_euclid(s)) * s + cc.rem_euclid(s)) as usize]
                };
                out[(r * s + c) as usize] =
                    (at(r, c) + at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1)) / 5.0;
            }
        }
        out
    }

    /// IDX container bytes for the image tensor (dims `count x 28 x 28`).
    pub fn images_idx(f: &Fixture) -> Vec<u8> {
        let mut out = vec![0u8, 0, 0x08, 3];
        out.extend_from_slice(&(f.count as u32).to_be_bytes());
        out.extend_from_slice(&(SIDE as u32).to_be_bytes());
        out.extend_from_slice(&(SIDE as u32).to_be_bytes());
        out.extend_from_slice(&f.images);
        out
    }

    /// IDX container bytes for the label tensor (dims `count`).
    pub fn labels_idx(f: &Fixture) -> Vec<u8> {
        let mut out = vec![0u8, 0, 0x08, 1];
        out.extend_from_slice(&(f.count as u32).to_be_bytes());
        out.extend_from_slice(&f.labels);
        out
    }

    /// Writes `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` into `dir`.
    pub fn write_to_dir(dir: &std::path::Path, seed: u64, count: usize) -> std::io::Result<()> {
        let f = generate(seed, count);
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train-images-idx3-ubyte"), images_idx(&f))?;
        std::fs::write(dir.join("train-labels-idx1-ubyte"), labels_idx(&f))?;
        Ok(())
    }
}
