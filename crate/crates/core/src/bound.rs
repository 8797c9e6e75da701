//! Robust PAC-Bayes certificate for Gaussian posteriors over θ.
//!
//! The certified quantity is
//!
//! ```text
//! E_Q[R̂_S(θ)] + ρ E_Q[‖M(θ)‖_op] + sqrt(2 E_Q[σ(θ)²] (KL(Q‖P) + ln(n/δ)) / (n − 1))
//! ```
//!
//! with `Q = N(μ, σ_q² I)` and `P = N(0, σ_p² I)`. Expectations under `Q` are
//! Monte-Carlo averages over `θ⁽ʲ⁾ = μ + σ_q ε⁽ʲ⁾` for a frozen set of `ε⁽ʲ⁾`,
//! which makes the objective a deterministic, almost-everywhere smooth
//! function of `(μ, log σ_q)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::{certificate_gradients_at, DisturbanceModel, WeightedMapBasis};
use crate::error::{dim_err, Error, Result};

/// `N(μ, σ_q² I)` with `σ_q = exp(log_sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: DVector<f64>,
    pub log_sigma: f64,
}

impl GaussianPosterior {
    pub fn new(mu: DVector<f64>, log_sigma: f64) -> Result<Self> {
        if !log_sigma.is_finite() || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "posterior",
                reason: "mean and log-std must be finite".into(),
            });
        }
        Ok(Self { mu, log_sigma })
    }

    /// Point mass at `mu` (`σ_q = 0`); its KL to any Gaussian prior is infinite.
    pub fn point(mu: DVector<f64>) -> Self {
        Self { mu, log_sigma: f64::NEG_INFINITY }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// `[μ; log σ_q]`, the optimizer's coordinates.
    pub fn to_params(&self) -> DVector<f64> {
        let d = self.dim();
        DVector::from_fn(d + 1, |i, _| if i < d { self.mu[i] } else { self.log_sigma })
    }

    pub fn from_params(params: &DVector<f64>) -> Result<Self> {
        let d = params.len().checked_sub(1).ok_or_else(|| dim_err("params", "at least 1", 0))?;
        Self::new(params.rows(0, d).into_owned(), params[d])
    }
}

/// `N(0, σ_p² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    sigma: f64,
}

impl GaussianPrior {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument {
                name: "sigma_prior",
                reason: format!("must be finite and > 0, got {sigma}"),
            });
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// i.i.d. disturbance trajectories stored as the columns of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    trajectories: DMatrix<f64>,
}

impl TrainingSample {
    pub fn new(trajectories: DMatrix<f64>) -> Result<Self> {
        if trajectories.ncols() == 0 {
            return Err(Error::InvalidArgument {
                name: "sample",
                reason: "needs at least one trajectory".into(),
            });
        }
        Ok(Self { trajectories })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Self::new(DMatrix::zeros(0, 0));
        }
        let dim = columns[0].len();
        if let Some(bad) = columns.iter().find(|c| c.len() != dim) {
            return Err(dim_err("sample", dim, bad.len()));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    pub fn n(&self) -> usize {
        self.trajectories.ncols()
    }

    pub fn w_dim(&self) -> usize {
        self.trajectories.nrows()
    }

    pub fn trajectories(&self) -> &DMatrix<f64> {
        &self.trajectories
    }
}

/// Terms of the certified bound; `total_bound` is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateBreakdown {
    pub gibbs_empirical_risk: f64,
    pub wasserstein_penalty: f64,
    pub complexity: f64,
    pub total_bound: f64,
    pub rho: f64,
    pub delta: f64,
    pub n: usize,
    pub kl: f64,
    pub expected_lipschitz: f64,
    pub expected_sigma_sq: f64,
}

/// Frozen standard-normal draws, one column per Monte-Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloPlan {
    eps: DMatrix<f64>,
}

impl MonteCarloPlan {
    pub fn draw(dim: usize, samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument {
                name: "mc_samples",
                reason: "must be at least 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DMatrix::from_fn(dim, samples, |_, _| StandardNormal.sample(&mut rng));
        Ok(Self { eps })
    }

    pub fn from_eps(eps: DMatrix<f64>) -> Result<Self> {
        if eps.ncols() == 0 {
            return Err(Error::InvalidArgument {
                name: "mc_samples",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self { eps })
    }

    pub fn samples(&self) -> usize {
        self.eps.ncols()
    }

    pub fn dim(&self) -> usize {
        self.eps.nrows()
    }

    pub fn eps(&self) -> &DMatrix<f64> {
        &self.eps
    }

    /// `θ⁽ʲ⁾ = μ + σ_q ε⁽ʲ⁾`.
    pub fn theta(&self, posterior: &GaussianPosterior, j: usize) -> DVector<f64> {
        &posterior.mu + self.eps.column(j) * posterior.sigma()
    }
}

/// `(1/n) Σ ‖M(θ) wᵢ‖`.
pub fn empirical_risk(map: &WeightedMapBasis, theta: &DVector<f64>, sample: &TrainingSample) -> Result<f64> {
    check_sample(map, sample)?;
    let m = map.eval(theta)?;
    Ok(risk_and_gradient(map, &m, sample).0)
}

pub fn empirical_risk_gradient(
    map: &WeightedMapBasis,
    theta: &DVector<f64>,
    sample: &TrainingSample,
) -> Result<DVector<f64>> {
    check_sample(map, sample)?;
    let m = map.eval(theta)?;
    Ok(risk_and_gradient(map, &m, sample).1)
}

/// Risk at `M` and its θ-gradient `(1/n) Σ ⟨Mᵢ, ŷ wᵀ⟩` with `ŷ = Mw/‖Mw‖`, zero when `Mw = 0`.
fn risk_and_gradient(map: &WeightedMapBasis, m: &DMatrix<f64>, sample: &TrainingSample) -> (f64, DVector<f64>) {
    let w = sample.trajectories();
    let n = w.ncols() as f64;
    let mut y = m * w;
    let mut total = 0.0;
    for mut col in y.column_iter_mut() {
        let norm = col.norm();
        total += norm;
        if norm > 0.0 {
            col /= norm;
        } else {
            col.fill(0.0);
        }
    }
    let g = (y * w.transpose()) / n;
    (total / n, map.contract(&g))
}

fn check_sample(map: &WeightedMapBasis, sample: &TrainingSample) -> Result<()> {
    if sample.w_dim() != map.w_dim() {
        return Err(dim_err("sample", map.w_dim(), sample.w_dim()));
    }
    Ok(())
}

/// Closed-form `KL(N(μ, σ_q² I) ‖ N(0, σ_p² I))`.
pub fn kl_gaussians(q: &GaussianPosterior, p: &GaussianPrior) -> f64 {
    let d = q.dim() as f64;
    let var_p = p.sigma() * p.sigma();
    let ratio = (2.0 * q.log_sigma).exp() / var_p;
    let log_ratio = 2.0 * (q.log_sigma - p.sigma().ln());
    0.5 * (d * (ratio - 1.0 - log_ratio) + q.mu.norm_squared() / var_p)
}

/// `sqrt(2 E_Q[σ²] (KL + ln(n/δ)) / (n − 1))`.
pub fn complexity_term(expected_sigma_sq: f64, kl: f64, n: usize, delta: f64) -> Result<f64> {
    check_n_delta(n, delta)?;
    if !(expected_sigma_sq >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "expected_sigma_sq",
            reason: format!("must be >= 0, got {expected_sigma_sq}"),
        });
    }
    let numerator = 2.0 * expected_sigma_sq * (kl + (n as f64 / delta).ln());
    Ok((numerator / (n as f64 - 1.0)).sqrt())
}

fn check_n_delta(n: usize, delta: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument {
            name: "n",
            reason: format!("the bound needs at least 2 samples, got {n}"),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument {
            name: "delta",
            reason: format!("must lie in (0, 1), got {delta}"),
        });
    }
    Ok(())
}

/// Everything the objective needs apart from the posterior and the Monte-Carlo plan.
#[derive(Debug, Clone, Copy)]
pub struct BoundProblem<'a> {
    pub map: &'a WeightedMapBasis,
    pub prior: GaussianPrior,
    pub sample: &'a TrainingSample,
    pub model: &'a DisturbanceModel,
    pub rho: f64,
    pub delta: f64,
}

impl BoundProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        check_sample(self.map, self.sample)?;
        check_n_delta(self.sample.n(), self.delta)?;
        if self.model.dim() != self.map.w_dim() {
            return Err(dim_err("disturbance model", self.map.w_dim(), self.model.dim()));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidArgument {
                name: "rho",
                reason: format!("must be finite and >= 0, got {}", self.rho),
            });
        }
        Ok(())
    }
}

/// Objective value with its gradient in `(μ, log σ_q)`.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub breakdown: CertificateBreakdown,
    pub grad_mu: DVector<f64>,
    pub grad_log_sigma: f64,
    /// Monte-Carlo samples whose operator norm had a degenerate top singular value.
    pub degenerate_count: usize,
}

impl ObjectiveValue {
    pub fn gradient(&self) -> DVector<f64> {
        let d = self.grad_mu.len();
        DVector::from_fn(d + 1, |i, _| if i < d { self.grad_mu[i] } else { self.grad_log_sigma })
    }
}

struct SampleTerms {
    risk: f64,
    risk_grad: DVector<f64>,
    lipschitz: f64,
    lipschitz_grad: DVector<f64>,
    sigma: f64,
    sigma_grad: DVector<f64>,
    degenerate: bool,
}

/// Evaluates the robust bound and its reparameterization gradient.
///
/// Samples are evaluated in parallel but reduced in index order, so the result
/// does not depend on the thread count.
pub fn robust_objective(
    problem: &BoundProblem<'_>,
    posterior: &GaussianPosterior,
    plan: &MonteCarloPlan,
) -> Result<ObjectiveValue> {
    problem.validate()?;
    let d = problem.map.dim();
    if posterior.dim() != d {
        return Err(dim_err("posterior mean", d, posterior.dim()));
    }
    if plan.dim() != d {
        return Err(dim_err("monte-carlo plan", d, plan.dim()));
    }

    let terms: Vec<SampleTerms> = (0..plan.samples())
        .into_par_iter()
        .map(|j| {
            let theta = plan.theta(posterior, j);
            let m = problem.map.eval(&theta).expect("dimension checked above");
            let (risk, risk_grad) = risk_and_gradient(problem.map, &m, problem.sample);
            let (lip, sigma) = certificate_gradients_at(problem.map, &m, problem.model);
            SampleTerms {
                risk,
                risk_grad,
                lipschitz: lip.value,
                lipschitz_grad: lip.gradient,
                sigma: sigma.value,
                sigma_grad: sigma.gradient,
                degenerate: lip.degenerate || sigma.degenerate,
            }
        })
        .collect();

    let m = plan.samples() as f64;
    let sigma_q = posterior.sigma();
    let rho = problem.rho;

    let mut gibbs = 0.0;
    let mut lip_mean = 0.0;
    let mut sigma_sq = 0.0;
    let mut g_mu = DVector::zeros(d);
    let mut g_s = 0.0;
    let mut s2_mu = DVector::zeros(d);
    let mut s2_s = 0.0;
    let mut degenerate_count = 0;
    for (j, t) in terms.iter().enumerate() {
        let eps = plan.eps.column(j);
        gibbs += t.risk;
        lip_mean += t.lipschitz;
        sigma_sq += t.sigma * t.sigma;
        // ∂θ/∂μ = I, ∂θ/∂log σ_q = σ_q ε.
        let direct = &t.risk_grad + &t.lipschitz_grad * rho;
        g_s += sigma_q * direct.dot(&eps);
        g_mu += direct;
        let s2_grad = &t.sigma_grad * (2.0 * t.sigma);
        s2_s += sigma_q * s2_grad.dot(&eps);
        s2_mu += s2_grad;
        degenerate_count += usize::from(t.degenerate);
    }
    gibbs /= m;
    lip_mean /= m;
    sigma_sq /= m;
    g_mu /= m;
    g_s /= m;
    s2_mu /= m;
    s2_s /= m;

    let n = problem.sample.n();
    let kl = kl_gaussians(posterior, &problem.prior);
    let complexity = complexity_term(sigma_sq, kl, n, problem.delta)?;
    let var_p = problem.prior.sigma().powi(2);
    let kl_mu = &posterior.mu / var_p;
    let kl_s = d as f64 * (sigma_q * sigma_q / var_p - 1.0);
    if complexity > 0.0 {
        let log_term = kl + (n as f64 / problem.delta).ln();
        let scale = 1.0 / ((n as f64 - 1.0) * complexity);
        g_mu += (s2_mu * log_term + kl_mu * sigma_sq) * scale;
        g_s += (s2_s * log_term + kl_s * sigma_sq) * scale;
    }

    let wasserstein_penalty = rho * lip_mean;
    let breakdown = CertificateBreakdown {
        gibbs_empirical_risk: gibbs,
        wasserstein_penalty,
        complexity,
        total_bound: gibbs + wasserstein_penalty + complexity,
        rho,
        delta: problem.delta,
        n,
        kl,
        expected_lipschitz: lip_mean,
        expected_sigma_sq: sigma_sq,
    };
    Ok(ObjectiveValue { breakdown, grad_mu: g_mu, grad_log_sigma: g_s, degenerate_count })
}
