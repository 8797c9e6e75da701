//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slspac::certificates::{build_weighted_basis, WeightedMapBasis};
use slspac::lti::{CostWeights, LtiPlant};
use slspac::sls::{build_constraints, causal_basis, SlsBasis};

pub struct Fixture {
    pub plant: LtiPlant,
    pub weights: CostWeights,
    pub basis: SlsBasis,
    pub map: WeightedMapBasis,
}

pub fn double_integrator() -> Fixture {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let plant = LtiPlant::new(a, b, 10).unwrap();
    let weights = CostWeights::new(
        &plant,
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
        DMatrix::from_element(1, 1, 0.01),
    )
    .unwrap();
    let basis = causal_basis(&plant, &build_constraints(&plant));
    let map = build_weighted_basis(&basis, &weights).unwrap();
    Fixture { plant, weights, basis, map }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vector(rng: &mut impl Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_vector(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    normal_vector(rng, len, 1.0).normalize()
}

/// Plain-array simulation of `x_{k+1} = A x_k + B u_k + w_k` with `u_k = Φ_u[k] w`.
///
/// Returns the stacked states and inputs.
pub fn simulate(a: &[[f64; 2]; 2], b: &[f64; 2], phi_u: &DMatrix<f64>, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let horizon = phi_u.nrows();
    let mut x = vec![w[0], w[1]];
    let mut u = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let uk: f64 = (0..w.len()).map(|j| phi_u[(k, j)] * w[j]).sum();
        let (x0, x1) = (x[2 * k], x[2 * k + 1]);
        x.push(a[0][0] * x0 + a[0][1] * x1 + b[0] * uk + w[2 * k + 2]);
        x.push(a[1][0] * x0 + a[1][1] * x1 + b[1] * uk + w[2 * k + 3]);
        u.push(uk);
    }
    (x, u)
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let s = m.clone().svd(false, false).singular_values;
    let top = s.max();
    s.iter().filter(|&&v| v > tol * top).count()
}

/// Largest singular value from the symmetric eigenproblem of `MᵀM`.
pub fn spectral_norm_oracle(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    gram.symmetric_eigen().eigenvalues.max().max(0.0).sqrt()
}

/// Dimension of the causal achievable set: free causal unknowns minus the rank
/// of the achievability map restricted to them, built entry by entry.
pub fn causal_dimension_oracle(nx: usize, nu: usize, horizon: usize, a: &DMatrix<f64>, b: &DMatrix<f64>) -> (usize, usize) {
    let n = (horizon + 1) * nx;
    // Unknowns: Φ_x[r, c] with r/nx >= c/nx, Φ_u[r, c] with r/nu >= c/nx.
    let mut vars: Vec<(bool, usize, usize)> = Vec::new();
    for c in 0..n {
        for r in 0..n {
            if r / nx >= c / nx {
                vars.push((true, r, c));
            }
        }
        for r in 0..horizon * nu {
            if r / nu >= c / nx {
                vars.push((false, r, c));
            }
        }
    }
    // Equation (row block k+1 of Φ_x) − A (row block k of Φ_x) − B (row block k of Φ_u) = I-block,
    // plus row block 0 of Φ_x = I-block.
    let mut f = DMatrix::<f64>::zeros(n * n, vars.len());
    for (col, &(is_x, r, c)) in vars.iter().enumerate() {
        if is_x {
            f[(c * n + r, col)] += 1.0;
            let k = r / nx;
            if k < horizon {
                for i in 0..nx {
                    f[(c * n + (k + 1) * nx + i, col)] -= a[(i, r % nx)];
                }
            }
        } else {
            let k = r / nu;
            for i in 0..nx {
                f[(c * n + (k + 1) * nx + i, col)] -= b[(i, r % nu)];
            }
        }
    }
    let rank = numerical_rank(&f, 1e-10);
    (vars.len(), rank)
}
