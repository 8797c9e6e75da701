//! Finite-horizon System Level Synthesis parameterization.
//!
//! Closed-loop responses `(Φ_x, Φ_u)` map the stacked disturbance to the
//! stacked state and input. They are achievable iff `F_x Φ_x + F_u Φ_u = I`
//! and causal iff both are block lower-triangular. Every such pair is
//! `vec(Φ) = vec(Φ₀) + H θ`, with `Φ₀` the open-loop response and one column
//! of `H` per free causal entry of `Φ_u`.
//!
//! `vec` is column-stacking everywhere, which is also nalgebra's storage order.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Result};
use crate::lti::LtiPlant;

/// Block bidiagonal achievability constraints and their vectorized form.
#[derive(Debug, Clone)]
pub struct LiftedConstraints {
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    /// `[I ⊗ F_x, I ⊗ F_u]`, acting on `[vec(Φ_x); vec(Φ_u)]`.
    pub f: DMatrix<f64>,
    /// `vec(I)`.
    pub b: DVector<f64>,
}

impl LiftedConstraints {
    /// `‖F_x Φ_x + F_u Φ_u − I‖_∞` (largest absolute entry).
    pub fn residual(&self, phi_x: &DMatrix<f64>, phi_u: &DMatrix<f64>) -> f64 {
        let n = self.fx.nrows();
        let r = &self.fx * phi_x + &self.fu * phi_u - DMatrix::<f64>::identity(n, n);
        r.amax()
    }
}

pub fn build_constraints(plant: &LtiPlant) -> LiftedConstraints {
    let (nx, nu, horizon) = (plant.nx(), plant.nu(), plant.horizon());
    let n = plant.w_dim();
    let mut fx = DMatrix::identity(n, n);
    let mut fu = DMatrix::zeros(n, plant.u_dim());
    for k in 0..horizon {
        fx.view_mut(((k + 1) * nx, k * nx), (nx, nx)).copy_from(&(-plant.a()));
        fu.view_mut(((k + 1) * nx, k * nu), (nx, nu)).copy_from(&(-plant.b()));
    }

    let n_x_vars = n * n;
    let n_u_vars = plant.u_dim() * n;
    let mut f = DMatrix::zeros(n * n, n_x_vars + n_u_vars);
    for col in 0..n {
        f.view_mut((col * n, col * n), (n, n)).copy_from(&fx);
        f.view_mut((col * n, n_x_vars + col * plant.u_dim()), (n, plant.u_dim()))
            .copy_from(&fu);
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let b = DVector::from_column_slice(identity.as_slice());
    LiftedConstraints { fx, fu, f, b }
}

/// Open-loop response: `Φ_u = 0` and block `(k, j)` of `Φ_x` equal to `A^{k−j}` for `j ≤ k`.
pub fn open_loop_baseline(plant: &LtiPlant) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nx, horizon) = (plant.nx(), plant.horizon());
    let n = plant.w_dim();
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::<f64>::identity(nx, nx));
    for p in 1..=horizon {
        let next = plant.a() * &powers[p - 1];
        powers.push(next);
    }
    let mut phi_x = DMatrix::zeros(n, n);
    for k in 0..=horizon {
        for j in 0..=k {
            phi_x.view_mut((k * nx, j * nx), (nx, nx)).copy_from(&powers[k - j]);
        }
    }
    (phi_x, DMatrix::zeros(plant.u_dim(), n))
}

/// Affine parameterization `θ ↦ (Φ_x(θ), Φ_u(θ))` of causal achievable responses.
#[derive(Debug, Clone)]
pub struct SlsBasis {
    pub phi0_x: DMatrix<f64>,
    pub phi0_u: DMatrix<f64>,
    /// Columns are `[vec(ΔΦ_x); vec(ΔΦ_u)]` for each coordinate of θ.
    pub h: DMatrix<f64>,
    /// `true` where `Φ_u` may be nonzero.
    pub causal_mask: DMatrix<bool>,
    /// `(row, col)` of the `Φ_u` entry that coordinate `i` of θ drives.
    pub entries: Vec<(usize, usize)>,
    nx: usize,
    nu: usize,
    horizon: usize,
}

impl SlsBasis {
    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn w_dim(&self) -> usize {
        self.phi0_x.ncols()
    }

    /// Perturbation `(ΔΦ_x, ΔΦ_u)` contributed by a unit step in coordinate `i`.
    pub fn column(&self, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        unvec(&self.h.column(i).into_owned(), self.phi0_x.shape(), self.phi0_u.shape())
    }

    /// `vec(Φ) = vec(Φ₀) + Hθ`, reshaped back into `(Φ_x, Φ_u)`.
    pub fn realize(&self, theta: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if theta.len() != self.dim() {
            return Err(dim_err("theta", self.dim(), theta.len()));
        }
        let mut v = self.baseline_vec();
        v.gemv(1.0, &self.h, theta, 1.0);
        Ok(unvec(&v, self.phi0_x.shape(), self.phi0_u.shape()))
    }

    fn baseline_vec(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.h.nrows());
        let nxv = self.phi0_x.len();
        v.rows_mut(0, nxv).copy_from_slice(self.phi0_x.as_slice());
        v.rows_mut(nxv, self.phi0_u.len()).copy_from_slice(self.phi0_u.as_slice());
        v
    }

    /// True if every entry outside the causal mask is exactly zero.
    pub fn respects_mask(&self, phi_u: &DMatrix<f64>) -> bool {
        phi_u.shape() == self.causal_mask.shape()
            && phi_u
                .iter()
                .zip(self.causal_mask.iter())
                .all(|(&v, &allowed)| allowed || v == 0.0)
    }
}

fn unvec(
    v: &DVector<f64>,
    x_shape: (usize, usize),
    u_shape: (usize, usize),
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nxv = x_shape.0 * x_shape.1;
    let phi_x = DMatrix::from_column_slice(x_shape.0, x_shape.1, &v.as_slice()[..nxv]);
    let phi_u = DMatrix::from_column_slice(u_shape.0, u_shape.1, &v.as_slice()[nxv..]);
    (phi_x, phi_u)
}

/// Causal mask of `Φ_u`: input block `k` may depend on disturbance blocks `0..=k`.
pub fn causal_mask(plant: &LtiPlant) -> DMatrix<bool> {
    let (nx, nu) = (plant.nx(), plant.nu());
    DMatrix::from_fn(plant.u_dim(), plant.w_dim(), |row, col| col / nx <= row / nu)
}

/// Unit-impulse basis over the causal entries of `Φ_u`.
///
/// Coordinates are ordered like `vec(Φ_u)` restricted to the mask. Each
/// column sets its `Φ_u` entry to one and completes `Φ_x` through
/// `Φ_x[t+1] = A Φ_x[t] + B Φ_u[t]`, so `F · column = 0` exactly up to rounding.
pub fn causal_basis(plant: &LtiPlant, constraints: &LiftedConstraints) -> SlsBasis {
    let (nx, nu, horizon) = (plant.nx(), plant.nu(), plant.horizon());
    let n = plant.w_dim();
    debug_assert_eq!(constraints.fx.nrows(), n);
    let mask = causal_mask(plant);
    let entries: Vec<(usize, usize)> = (0..n)
        .flat_map(|col| (0..plant.u_dim()).map(move |row| (row, col)))
        .filter(|&(row, col)| mask[(row, col)])
        .collect();

    let nxv = n * n;
    let mut h = DMatrix::zeros(nxv + plant.u_dim() * n, entries.len());
    for (i, &(row, col)) in entries.iter().enumerate() {
        let (step, input) = (row / nu, row % nu);
        h[(nxv + col * plant.u_dim() + row, i)] = 1.0;
        // Only column `col` of Φ_x changes, in block rows step+1..=T.
        let mut response = plant.b().column(input).into_owned();
        for t in (step + 1)..=horizon {
            for r in 0..nx {
                h[(col * n + t * nx + r, i)] = response[r];
            }
            response = plant.a() * response;
        }
    }

    let (phi0_x, phi0_u) = open_loop_baseline(plant);
    SlsBasis {
        phi0_x,
        phi0_u,
        h,
        causal_mask: mask,
        entries,
        nx,
        nu,
        horizon,
    }
}

/// True if every block strictly above the block diagonal is zero.
pub fn is_block_lower_triangular(m: &DMatrix<f64>, row_block: usize, col_block: usize) -> bool {
    (0..m.nrows()).all(|r| {
        (0..m.ncols()).all(|c| c / col_block <= r / row_block || m[(r, c)] == 0.0)
    })
}
