mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use common::{double_integrator, normal_vector, rng};
use slspac::bound::{
    empirical_risk, kl_gaussians, robust_objective, BoundProblem, GaussianPosterior, GaussianPrior, MonteCarloPlan,
};
use slspac::certificates::DisturbanceModel;
use slspac::lab::{
    controller_risk, draw_disturbances, sample_training, shifted_model, ShiftDirection, ShiftSpec,
};
use slspac::lti::{rollout, trajectory_cost};
use slspac::optimizer::{fit_posterior, initialize_posterior, InitStrategy, OptimizerConfig};

fn model() -> DisturbanceModel {
    DisturbanceModel::isotropic(22, 0.02).unwrap()
}

#[test]
fn open_loop_empirical_risk_matches_rollout_costs() {
    let fx = double_integrator();
    let sample = sample_training(&model(), 100, 7).unwrap();
    let theta = DVector::zeros(fx.basis.dim());
    let zero_inputs = vec![DVector::zeros(1); 10];
    let oracle = sample
        .trajectories()
        .column_iter()
        .map(|w| trajectory_cost(&fx.weights, &rollout(&fx.plant, &zero_inputs, &w.into_owned()).unwrap()).unwrap())
        .sum::<f64>()
        / 100.0;
    assert!((empirical_risk(&fx.map, &theta, &sample).unwrap() - oracle).abs() < 1e-10);
}

#[test]
fn zero_rho_bound_is_gibbs_plus_complexity() {
    let fx = double_integrator();
    let m = model();
    let sample = sample_training(&m, 32, 1).unwrap();
    let plan = MonteCarloPlan::draw(fx.basis.dim(), 8, 2).unwrap();
    let problem = BoundProblem {
        map: &fx.map,
        prior: GaussianPrior::new(1.0).unwrap(),
        sample: &sample,
        model: &m,
        rho: 0.0,
        delta: 0.05,
    };
    let q = GaussianPosterior::new(normal_vector(&mut rng(3), fx.basis.dim(), 0.1), 0.1_f64.ln()).unwrap();
    let b = robust_objective(&problem, &q, &plan).unwrap().breakdown;
    assert_eq!(b.wasserstein_penalty, 0.0);
    assert_eq!(b.total_bound, b.gibbs_empirical_risk + b.complexity);
}

#[test]
fn posterior_equal_to_prior_has_zero_kl() {
    let prior = GaussianPrior::new(0.7).unwrap();
    let q = GaussianPosterior::new(DVector::zeros(5), 0.7_f64.ln()).unwrap();
    assert!(kl_gaussians(&q, &prior).abs() < 1e-14);
}

fn fitted(n: usize, rho: f64, seed: u64) -> (f64, slspac::optimizer::PosteriorFit, f64) {
    let fx = double_integrator();
    let m = model();
    let sample = sample_training(&m, n, seed).unwrap();
    let plan = MonteCarloPlan::draw(fx.basis.dim(), 24, seed + 1).unwrap();
    let problem = BoundProblem {
        map: &fx.map,
        prior: GaussianPrior::new(1.0).unwrap(),
        sample: &sample,
        model: &m,
        rho,
        delta: 0.05,
    };
    let init = initialize_posterior(&fx.basis, InitStrategy::Zeros, 0.1).unwrap();
    let initial = robust_objective(&problem, &init, &plan).unwrap().breakdown.total_bound;
    let fit = fit_posterior(&problem, &plan, &init, &OptimizerConfig::default()).unwrap();
    let recomputed = robust_objective(&problem, &fit.posterior, &plan).unwrap().breakdown.total_bound;
    (initial, fit, recomputed)
}

#[test]
fn optimization_improves_bound_and_reports_consistent_certificate() {
    let (initial, fit, recomputed) = fitted(64, 0.08, 10);
    assert!(fit.breakdown.total_bound < initial);
    assert_eq!(recomputed, fit.breakdown.total_bound);
    let last = fit.trace.rows.last().unwrap();
    let best = fit.trace.rows.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
    assert_eq!(best, fit.breakdown.total_bound);
    assert!(last.objective <= fit.trace.rows[0].objective);
    assert!(fit.trace.rows.windows(2).all(|w| w[1].objective <= w[0].objective));
    assert!(fit.trace.rows.len() <= OptimizerConfig::default().max_iterations + 1);
}

#[test]
fn identical_seeds_give_bit_identical_traces() {
    let (_, a, _) = fitted(32, 0.08, 20);
    let (_, b, _) = fitted(32, 0.08, 20);
    assert_eq!(a.trace.rows, b.trace.rows);
    assert_eq!(a.posterior, b.posterior);
}

#[test]
fn robust_bound_decreases_with_more_data() {
    let totals: Vec<f64> = [16, 32, 64, 128]
        .iter()
        .map(|&n| {
            let b = fitted(n, 0.08, 30).1.breakdown;
            assert!(b.total_bound.is_finite() && b.complexity.is_finite());
            b.total_bound
        })
        .collect();
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}

#[test]
fn gaussian_sample_mean_is_within_clt_band() {
    let draws = 100_000;
    let w = draw_disturbances(&model(), draws, 40);
    let tol = 4.0 * 0.02 / (draws as f64).sqrt();
    for mean in w.column_mean().iter() {
        assert!(mean.abs() <= tol, "{mean} outside ±{tol}");
    }
}

#[test]
fn bounded_draws_stay_in_ball() {
    let w = draw_disturbances(&DisturbanceModel::bounded(22, 0.3).unwrap(), 2000, 41);
    assert!(w.column_iter().all(|c| c.norm() <= 0.3 + 1e-15));
}

#[test]
fn explicit_shift_moves_the_mean() {
    let fx = double_integrator();
    let e1 = DVector::from_fn(22, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let spec = ShiftSpec::new(0.08, ShiftDirection::Explicit(e1)).unwrap();
    let shifted = shifted_model(&model(), &spec, &fx.map, &DVector::zeros(fx.basis.dim())).unwrap();
    let DisturbanceModel::Gaussian(g) = shifted else { panic!("shift keeps the model Gaussian") };
    assert_eq!(g.mean[0], 0.08);
    assert!(g.mean.rows(1, 21).iter().all(|&v| v == 0.0));
}

#[test]
fn adversarial_shift_raises_risk() {
    let fx = double_integrator();
    let mu = normal_vector(&mut rng(42), fx.basis.dim(), 0.1);
    let spec = ShiftSpec::new(0.08, ShiftDirection::Adversarial).unwrap();
    let shifted = shifted_model(&model(), &spec, &fx.map, &mu).unwrap();
    let base = controller_risk(&fx.map, &mu, &model(), 5000, 43).unwrap();
    let moved = controller_risk(&fx.map, &mu, &shifted, 5000, 43).unwrap();
    assert!(moved.mean >= base.mean);
}

#[test]
fn bounded_models_refuse_mean_shifts() {
    let fx = double_integrator();
    let spec = ShiftSpec::new(0.08, ShiftDirection::Adversarial).unwrap();
    let bounded = DisturbanceModel::bounded(22, 0.3).unwrap();
    assert!(shifted_model(&bounded, &spec, &fx.map, &DVector::zeros(fx.basis.dim())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), log_sigma in -4.0..2.0_f64, prior in 0.1..5.0_f64) {
        let q = GaussianPosterior::new(normal_vector(&mut rng(seed), 7, 1.0), log_sigma).unwrap();
        prop_assert!(kl_gaussians(&q, &GaussianPrior::new(prior).unwrap()) >= 0.0);
    }

    #[test]
    fn breakdown_terms_sum_to_total(seed in 0u64..1000, rho in 0.0..0.5_f64) {
        let fx = double_integrator();
        let m = model();
        let sample = sample_training(&m, 8, seed).unwrap();
        let plan = MonteCarloPlan::draw(fx.basis.dim(), 4, seed).unwrap();
        let problem = BoundProblem {
            map: &fx.map,
            prior: GaussianPrior::new(1.0).unwrap(),
            sample: &sample,
            model: &m,
            rho,
            delta: 0.05,
        };
        let q = GaussianPosterior::new(normal_vector(&mut rng(seed), fx.basis.dim(), 0.1), -2.0).unwrap();
        let b = robust_objective(&problem, &q, &plan).unwrap().breakdown;
        let sum = b.gibbs_empirical_risk + b.wasserstein_penalty + b.complexity;
        prop_assert!((b.total_bound - sum).abs() <= 1e-12);
        prop_assert!(b.wasserstein_penalty >= 0.0);
    }
}
