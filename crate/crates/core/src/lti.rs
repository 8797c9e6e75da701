//! Discrete-time LTI plant, lifted cost weights and direct rollout simulation.
//!
//! Stacked vectors use a single block order throughout the crate:
//! `x = (x_0, …, x_T)`, `u = (u_0, …, u_{T-1})` and `w = (x_0, w_0, …, w_{T-1})`,
//! so the first disturbance block is the initial state.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, shape, Error, Result};
use crate::linalg::{repeat_block_diag, symmetric_sqrt, Definiteness};

/// `x_{k+1} = A x_k + B u_k + w_k` over a horizon of `T` control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: usize,
}

impl LtiPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(dim_err("A", "nonempty square matrix", shape(a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(dim_err(
                "B",
                format!("{} rows and at least one column", a.nrows()),
                shape(b.nrows(), b.ncols()),
            ));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument {
                name: "horizon",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self { a, b, horizon })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    /// Length of the stacked state and disturbance vectors, `(T+1)·n_x`.
    pub fn w_dim(&self) -> usize {
        (self.horizon + 1) * self.nx()
    }

    /// Length of the stacked input vector, `T·n_u`.
    pub fn u_dim(&self) -> usize {
        self.horizon * self.nu()
    }
}

/// Per-step state/input weights and their lifted block-diagonal forms.
#[derive(Debug, Clone)]
pub struct CostWeights {
    q_block: DMatrix<f64>,
    r_block: DMatrix<f64>,
    q_sqrt: DMatrix<f64>,
    r_sqrt: DMatrix<f64>,
    horizon: usize,
}

impl CostWeights {
    /// Validates `Q̂` as PSD and `R̂` as PD by factorizing both.
    pub fn new(plant: &LtiPlant, q_block: DMatrix<f64>, r_block: DMatrix<f64>) -> Result<Self> {
        if q_block.shape() != (plant.nx(), plant.nx()) {
            return Err(dim_err(
                "Q",
                shape(plant.nx(), plant.nx()),
                shape(q_block.nrows(), q_block.ncols()),
            ));
        }
        if r_block.shape() != (plant.nu(), plant.nu()) {
            return Err(dim_err(
                "R",
                shape(plant.nu(), plant.nu()),
                shape(r_block.nrows(), r_block.ncols()),
            ));
        }
        let q_sqrt = symmetric_sqrt(&q_block, Definiteness::SemiDefinite)
            .map_err(|reason| Error::InvalidWeight { name: "Q", reason })?;
        let r_sqrt = symmetric_sqrt(&r_block, Definiteness::Definite)
            .map_err(|reason| Error::InvalidWeight { name: "R", reason })?;
        Ok(Self {
            q_block,
            r_block,
            q_sqrt,
            r_sqrt,
            horizon: plant.horizon(),
        })
    }

    pub fn q_block(&self) -> &DMatrix<f64> {
        &self.q_block
    }

    pub fn r_block(&self) -> &DMatrix<f64> {
        &self.r_block
    }

    pub fn q_sqrt_block(&self) -> &DMatrix<f64> {
        &self.q_sqrt
    }

    pub fn r_sqrt_block(&self) -> &DMatrix<f64> {
        &self.r_sqrt
    }

    /// `Q_c`, with `T+1` copies of `Q̂` on the diagonal.
    pub fn lifted_q(&self) -> DMatrix<f64> {
        repeat_block_diag(&self.q_block, self.horizon + 1)
    }

    /// `R_c`, with `T` copies of `R̂` on the diagonal.
    pub fn lifted_r(&self) -> DMatrix<f64> {
        repeat_block_diag(&self.r_block, self.horizon)
    }

    pub fn lifted_q_sqrt(&self) -> DMatrix<f64> {
        repeat_block_diag(&self.q_sqrt, self.horizon + 1)
    }

    pub fn lifted_r_sqrt(&self) -> DMatrix<f64> {
        repeat_block_diag(&self.r_sqrt, self.horizon)
    }
}

/// Stacked state, input and disturbance trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
}

/// Simulates the plant step by step.
///
/// `inputs` holds one `n_u` vector per control step; `w` is the stacked
/// disturbance whose first block is `x_0`.
pub fn rollout(plant: &LtiPlant, inputs: &[DVector<f64>], w: &DVector<f64>) -> Result<Trajectory> {
    let (nx, nu, horizon) = (plant.nx(), plant.nu(), plant.horizon());
    if inputs.len() != horizon {
        return Err(dim_err("inputs", format!("{horizon} steps"), format!("{} steps", inputs.len())));
    }
    if let Some((k, bad)) = inputs.iter().enumerate().find(|(_, u)| u.len() != nu) {
        return Err(dim_err("inputs", format!("step {k} of length {nu}"), bad.len()));
    }
    if w.len() != plant.w_dim() {
        return Err(dim_err("w", plant.w_dim(), w.len()));
    }

    let mut x = DVector::zeros(plant.w_dim());
    let mut u = DVector::zeros(plant.u_dim());
    x.rows_mut(0, nx).copy_from(&w.rows(0, nx));
    for k in 0..horizon {
        let xk = x.rows(k * nx, nx).into_owned();
        let next = plant.a() * xk + plant.b() * &inputs[k] + w.rows((k + 1) * nx, nx);
        x.rows_mut((k + 1) * nx, nx).copy_from(&next);
        u.rows_mut(k * nu, nu).copy_from(&inputs[k]);
    }
    Ok(Trajectory { x, u, w: w.clone() })
}

/// Square-root LQ cost `(Σ x_tᵀQ̂x_t + Σ u_tᵀR̂u_t)^{1/2}`.
pub fn trajectory_cost(weights: &CostWeights, traj: &Trajectory) -> Result<f64> {
    let nx = weights.q_block.nrows();
    let nu = weights.r_block.nrows();
    if traj.x.len() != (weights.horizon + 1) * nx {
        return Err(dim_err("x", (weights.horizon + 1) * nx, traj.x.len()));
    }
    if traj.u.len() != weights.horizon * nu {
        return Err(dim_err("u", weights.horizon * nu, traj.u.len()));
    }
    let mut total = 0.0;
    for t in 0..=weights.horizon {
        let xt = traj.x.rows(t * nx, nx);
        total += xt.dot(&(&weights.q_block * xt));
    }
    for t in 0..weights.horizon {
        let ut = traj.u.rows(t * nu, nu);
        total += ut.dot(&(&weights.r_block * ut));
    }
    Ok(total.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_plant(a: f64, b: f64, horizon: usize) -> LtiPlant {
        LtiPlant::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), horizon).unwrap()
    }

    #[test]
    fn zero_inputs_zero_disturbance() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            4,
        )
        .unwrap();
        let inputs = vec![DVector::zeros(1); 4];
        let traj = rollout(&plant, &inputs, &DVector::zeros(10)).unwrap();
        assert_eq!(traj.x, DVector::zeros(10));
        assert_eq!(traj.u, DVector::zeros(4));
    }

    #[test]
    fn identity_hold() {
        let plant = LtiPlant::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 3).unwrap();
        let inputs: Vec<_> = (0..3).map(|k| DVector::from_element(1, k as f64 + 5.0)).collect();
        let mut w = DVector::zeros(8);
        w[0] = 0.3;
        w[1] = -1.2;
        let traj = rollout(&plant, &inputs, &w).unwrap();
        for k in 0..4 {
            assert_eq!(traj.x[2 * k], 0.3);
            assert_eq!(traj.x[2 * k + 1], -1.2);
        }
    }

    #[test]
    fn dimension_errors_name_the_field() {
        let plant = scalar_plant(1.0, 1.0, 2);
        let err = rollout(&plant, &[DVector::zeros(1)], &DVector::zeros(3)).unwrap_err();
        assert!(err.to_string().contains("inputs"));
        let err = rollout(&plant, &vec![DVector::zeros(1); 2], &DVector::zeros(2)).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        let err = rollout(&plant, &[DVector::zeros(1), DVector::zeros(2)], &DVector::zeros(3)).unwrap_err();
        assert!(err.to_string().contains("inputs"));
    }

    #[test]
    fn plant_validation() {
        assert!(LtiPlant::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1), 1).is_err());
        assert!(LtiPlant::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), 1).is_err());
        assert!(LtiPlant::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), 0).is_err());
    }

    #[test]
    fn weight_validation() {
        let plant = scalar_plant(1.0, 1.0, 2);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(CostWeights::new(&plant, DMatrix::from_element(1, 1, 0.0), one.clone()).is_ok());
        assert!(CostWeights::new(&plant, one.clone(), DMatrix::from_element(1, 1, 0.0)).is_err());
        assert!(CostWeights::new(&plant, DMatrix::from_element(1, 1, -1.0), one.clone()).is_err());
        assert!(CostWeights::new(&plant, DMatrix::identity(2, 2), one).is_err());
    }

    #[test]
    fn lifted_weight_shapes() {
        let plant = scalar_plant(1.0, 1.0, 3);
        let w = CostWeights::new(&plant, DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 0.5))
            .unwrap();
        assert_eq!(w.lifted_q().shape(), (4, 4));
        assert_eq!(w.lifted_r().shape(), (3, 3));
        assert_eq!(w.lifted_q()[(3, 3)], 2.0);
    }

    #[test]
    fn cost_of_zero_and_unit_trajectory() {
        let plant = LtiPlant::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 1).unwrap();
        let weights = CostWeights::new(&plant, DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap();
        let zero = Trajectory { x: DVector::zeros(4), u: DVector::zeros(1), w: DVector::zeros(4) };
        assert_eq!(trajectory_cost(&weights, &zero).unwrap(), 0.0);
        let mut unit = zero.clone();
        unit.x[0] = 1.0;
        assert_eq!(trajectory_cost(&weights, &unit).unwrap(), 1.0);
    }

    #[test]
    fn rollout_is_linear() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            3,
        )
        .unwrap();
        let inputs: Vec<_> = (0..3).map(|k| DVector::from_element(1, 0.5 - k as f64)).collect();
        let w = DVector::from_fn(8, |i, _| (i as f64 * 0.37).sin());
        let base = rollout(&plant, &inputs, &w).unwrap();
        let scaled_inputs: Vec<_> = inputs.iter().map(|u| u * -2.5).collect();
        let scaled = rollout(&plant, &scaled_inputs, &(&w * -2.5)).unwrap();
        assert!((scaled.x - base.x * -2.5).amax() < 1e-12);
    }
}
