//! Training samples, Wasserstein-ball deployment shifts and Monte-Carlo test risk.
//!
//! Shifts are mean translations of a Gaussian model. The translation coupling
//! is optimal for `W1` between a distribution and its translate, so a shift of
//! norm `ρ_shift` lands exactly on the `W1` sphere of that radius.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::{GaussianPosterior, TrainingSample};
use crate::certificates::{operator_norm, DisturbanceModel, WeightedMapBasis};
use crate::error::{dim_err, Error, Result};

const DISTURBANCE_STREAM: u64 = 0;
const POSTERIOR_STREAM: u64 = 1;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `n` draws from the model as the columns of a matrix.
pub fn draw_disturbances(model: &DisturbanceModel, n: usize, seed: u64) -> DMatrix<f64> {
    draw_with(model, n, &mut stream(seed, DISTURBANCE_STREAM))
}

fn draw_with(model: &DisturbanceModel, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let dim = model.dim();
    let xi = DMatrix::from_fn(dim, n, |_, _| StandardNormal.sample(rng));
    match model {
        DisturbanceModel::Gaussian(g) => {
            let mut w = match g.isotropic_std {
                Some(c) => xi * c,
                None => &g.sqrt_cov * xi,
            };
            for mut col in w.column_iter_mut() {
                col += &g.mean;
            }
            w
        }
        DisturbanceModel::Bounded { radius, .. } => {
            let unit = Uniform::new(0.0_f64, 1.0);
            let mut w = xi;
            for mut col in w.column_iter_mut() {
                let norm = col.norm();
                let r = radius * unit.sample(rng).powf(1.0 / dim as f64);
                if norm > 0.0 {
                    col *= r / norm;
                }
            }
            w
        }
    }
}

/// `n` i.i.d. training trajectories, deterministic in `seed`.
pub fn sample_training(model: &DisturbanceModel, n: usize, seed: u64) -> Result<TrainingSample> {
    if n < 2 {
        return Err(Error::InvalidArgument {
            name: "n",
            reason: format!("training needs at least 2 trajectories, got {n}"),
        });
    }
    TrainingSample::new(draw_disturbances(model, n, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShiftDirection {
    /// Top right singular vector of `M` at the posterior mean.
    Adversarial,
    Explicit(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub shift_radius: f64,
    pub direction: ShiftDirection,
}

impl ShiftSpec {
    pub fn new(shift_radius: f64, direction: ShiftDirection) -> Result<Self> {
        if !(shift_radius >= 0.0) || !shift_radius.is_finite() {
            return Err(Error::InvalidArgument {
                name: "shift_radius",
                reason: format!("must be finite and >= 0, got {shift_radius}"),
            });
        }
        if let ShiftDirection::Explicit(d) = &direction {
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument {
                    name: "direction",
                    reason: format!("must have unit norm, got {}", d.norm()),
                });
            }
        }
        Ok(Self { shift_radius, direction })
    }
}

/// Translates the mean of a Gaussian model by `ρ_shift · direction`.
///
/// The adversarial direction is `±v₁` of `M(posterior_mean)`, with the sign
/// that increases `‖M(μ_w + ρ v)‖` at the model mean; ties go to the sign that
/// makes the largest-magnitude entry of `v₁` positive.
pub fn shifted_model(
    model: &DisturbanceModel,
    spec: &ShiftSpec,
    map: &WeightedMapBasis,
    posterior_mean: &DVector<f64>,
) -> Result<DisturbanceModel> {
    let DisturbanceModel::Gaussian(g) = model else {
        return Err(Error::UnsupportedShift);
    };
    let direction = match &spec.direction {
        ShiftDirection::Explicit(d) => d.clone(),
        ShiftDirection::Adversarial => adversarial_direction(map, posterior_mean, &g.mean)?,
    };
    if direction.len() != g.mean.len() {
        return Err(dim_err("direction", g.mean.len(), direction.len()));
    }
    let mut shifted = g.clone();
    shifted.mean += direction * spec.shift_radius;
    Ok(DisturbanceModel::Gaussian(shifted))
}

pub fn adversarial_direction(
    map: &WeightedMapBasis,
    posterior_mean: &DVector<f64>,
    model_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    if model_mean.len() != map.w_dim() {
        return Err(dim_err("model mean", map.w_dim(), model_mean.len()));
    }
    let m = map.eval(posterior_mean)?;
    let top = operator_norm(&m);
    let alignment = (&m * model_mean).dot(&top.u);
    let sign = if alignment > 0.0 {
        1.0
    } else if alignment < 0.0 {
        -1.0
    } else {
        top.v[top.v.iamax()].signum()
    };
    Ok(top.v * sign)
}

/// Mean loss of one controller with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn losses(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Vec<f64> {
    (m * w).column_iter().map(|c| c.norm()).collect()
}

/// `E_{w∼model} ‖M(θ) w‖` for a single θ from `n` seeded draws.
pub fn controller_risk(
    map: &WeightedMapBasis,
    theta: &DVector<f64>,
    model: &DisturbanceModel,
    n: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    check_counts(n, 1)?;
    check_model(map, model)?;
    let m = map.eval(theta)?;
    let (mean, std_error) = mean_and_se(&losses(&m, &draw_disturbances(model, n, seed)));
    Ok(RiskEstimate { mean, std_error, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub mean_test_risk: f64,
    /// Standard error over disturbance draws of the posterior-averaged loss.
    pub std_error: f64,
    pub n_test: usize,
    pub m_posterior: usize,
    /// Mean loss of each posterior sample over the shared draws.
    pub per_posterior_risks: Vec<f64>,
}

/// Nested Monte-Carlo estimate of `E_{θ∼Q} E_{w∼model} ‖M(θ) w‖`.
///
/// All posterior samples see the same `n_test` disturbance draws.
pub fn test_risk(
    map: &WeightedMapBasis,
    posterior: &GaussianPosterior,
    model: &DisturbanceModel,
    n_test: usize,
    m_posterior: usize,
    seed: u64,
) -> Result<TestReport> {
    check_counts(n_test, m_posterior)?;
    check_model(map, model)?;
    if posterior.dim() != map.dim() {
        return Err(dim_err("posterior mean", map.dim(), posterior.dim()));
    }
    let w = draw_disturbances(model, n_test, seed);
    let mut rng = stream(seed, POSTERIOR_STREAM);
    let eps = DMatrix::<f64>::from_fn(map.dim(), m_posterior, |_, _| StandardNormal.sample(&mut rng));
    let sigma = posterior.sigma();

    let per_theta: Vec<Vec<f64>> = (0..m_posterior)
        .into_par_iter()
        .map(|j| {
            let theta = &posterior.mu + eps.column(j) * sigma;
            let m = map.eval(&theta).expect("dimension checked above");
            losses(&m, &w)
        })
        .collect();

    let per_draw: Vec<f64> = (0..n_test)
        .map(|i| per_theta.iter().map(|l| l[i]).sum::<f64>() / m_posterior as f64)
        .collect();
    let (mean, std_error) = mean_and_se(&per_draw);
    let per_posterior_risks = per_theta.iter().map(|l| l.iter().sum::<f64>() / n_test as f64).collect();
    Ok(TestReport {
        mean_test_risk: mean,
        std_error,
        n_test,
        m_posterior,
        per_posterior_risks,
    })
}

fn check_counts(n_test: usize, m_posterior: usize) -> Result<()> {
    if n_test == 0 || m_posterior == 0 {
        return Err(Error::InvalidArgument {
            name: "counts",
            reason: format!("n_test and m_posterior must be >= 1, got {n_test} and {m_posterior}"),
        });
    }
    Ok(())
}

fn check_model(map: &WeightedMapBasis, model: &DisturbanceModel) -> Result<()> {
    if model.dim() != map.w_dim() {
        return Err(dim_err("disturbance model", map.w_dim(), model.dim()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(m: DMatrix<f64>) -> WeightedMapBasis {
        WeightedMapBasis::from_parts(m, &[]).unwrap()
    }

    #[test]
    fn degenerate_covariance_returns_mean() {
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let model = DisturbanceModel::gaussian(mean.clone(), DMatrix::zeros(3, 3)).unwrap();
        let s = sample_training(&model, 5, 1).unwrap();
        for c in s.trajectories().column_iter() {
            assert_eq!(c, mean);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let model = DisturbanceModel::isotropic(4, 0.3).unwrap();
        assert_eq!(sample_training(&model, 10, 3).unwrap(), sample_training(&model, 10, 3).unwrap());
        assert_ne!(sample_training(&model, 10, 3).unwrap(), sample_training(&model, 10, 4).unwrap());
        assert!(sample_training(&model, 1, 3).is_err());
    }

    #[test]
    fn bounded_draws_stay_in_ball() {
        let model = DisturbanceModel::bounded(5, 0.7).unwrap();
        let s = sample_training(&model, 2000, 11).unwrap();
        let norms: Vec<f64> = s.trajectories().column_iter().map(|c| c.norm()).collect();
        assert!(norms.iter().all(|&r| r <= 0.7 + 1e-12));
        // Uniform in a 5-ball puts mass (0.5)^5 inside half the radius.
        let inner = norms.iter().filter(|&&r| r < 0.35).count() as f64 / 2000.0;
        assert!(inner < 0.1);
    }

    #[test]
    fn zero_shift_and_explicit_shift() {
        let model = DisturbanceModel::isotropic(3, 0.02).unwrap();
        let map = fixed(DMatrix::identity(3, 3));
        let none = ShiftSpec::new(0.0, ShiftDirection::Adversarial).unwrap();
        let DisturbanceModel::Gaussian(g) = shifted_model(&model, &none, &map, &DVector::zeros(0)).unwrap() else {
            unreachable!()
        };
        assert_eq!(g.mean, DVector::zeros(3));

        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let spec = ShiftSpec::new(0.08, ShiftDirection::Explicit(e1)).unwrap();
        let DisturbanceModel::Gaussian(g) = shifted_model(&model, &spec, &map, &DVector::zeros(0)).unwrap() else {
            unreachable!()
        };
        assert_eq!(g.mean[0], 0.08);
        assert_eq!(g.cov, DMatrix::identity(3, 3) * 0.0004);
    }

    #[test]
    fn shift_validation() {
        assert!(ShiftSpec::new(-0.1, ShiftDirection::Adversarial).is_err());
        assert!(ShiftSpec::new(0.1, ShiftDirection::Explicit(DVector::from_vec(vec![1.0, 1.0]))).is_err());
        let bounded = DisturbanceModel::bounded(2, 1.0).unwrap();
        let spec = ShiftSpec::new(0.1, ShiftDirection::Adversarial).unwrap();
        let err = shifted_model(&bounded, &spec, &fixed(DMatrix::identity(2, 2)), &DVector::zeros(0));
        assert!(matches!(err, Err(Error::UnsupportedShift)));
    }

    #[test]
    fn adversarial_direction_is_top_singular_vector() {
        let map = fixed(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 2.0])));
        let model = DisturbanceModel::gaussian(DVector::from_vec(vec![0.0, -0.5, 0.0]), DMatrix::identity(3, 3)).unwrap();
        let spec = ShiftSpec::new(0.1, ShiftDirection::Adversarial).unwrap();
        let DisturbanceModel::Gaussian(g) = shifted_model(&model, &spec, &map, &DVector::zeros(0)).unwrap() else {
            unreachable!()
        };
        // Mean already points along −e₂, so the shift pushes further that way.
        assert!((g.mean[1] + 0.6).abs() < 1e-14);
    }

    #[test]
    fn test_risk_trivial_cases() {
        let map = fixed(DMatrix::identity(3, 3));
        let q = GaussianPosterior::new(DVector::zeros(0), 0.0).unwrap();
        let zero = DisturbanceModel::gaussian(DVector::zeros(3), DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(test_risk(&map, &q, &zero, 10, 2, 0).unwrap().mean_test_risk, 0.0);

        let w = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let point = DisturbanceModel::gaussian(w, DMatrix::zeros(3, 3)).unwrap();
        let report = test_risk(&map, &q, &point, 7, 3, 5).unwrap();
        assert!((report.mean_test_risk - 3.0).abs() < 1e-14);
        assert_eq!(report.std_error, 0.0);
        assert_eq!(report.per_posterior_risks.len(), 3);
        assert!(test_risk(&map, &q, &point, 0, 3, 5).is_err());
    }
}
