//! Experiment configuration, seeded runs, sweeps and their CSV/JSON artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::{
    robust_objective, BoundProblem, CertificateBreakdown, GaussianPosterior, GaussianPrior, MonteCarloPlan,
    TrainingSample,
};
use crate::certificates::{build_weighted_basis, DisturbanceModel, WeightedMapBasis};
use crate::error::{Error, Result};
use crate::lab::{sample_training, shifted_model, test_risk, ShiftDirection, ShiftSpec, TestReport};
use crate::lti::{CostWeights, LtiPlant};
use crate::optimizer::{fit_posterior, initialize_posterior, InitStrategy, OptimizerConfig, PosteriorFit, Termination};
use crate::sls::{build_constraints, causal_basis, LiftedConstraints, SlsBasis};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub plant: PlantConfig,
    pub weights: WeightsConfig,
    pub disturbance: DisturbanceConfig,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub a: Rows,
    pub b: Rows,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub q: Rows,
    pub r: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceConfig {
    /// `covariance` wins over the isotropic `std` shorthand when both are set.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariance: Option<Rows>,
    },
    Bounded { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub sigma_prior: f64,
    /// Initial posterior standard deviation.
    pub init_sigma: f64,
    pub delta: f64,
    pub mc_samples: usize,
    pub rho: Vec<f64>,
    pub n: Vec<usize>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            sigma_prior: 1.0,
            init_sigma: 0.1,
            delta: 0.05,
            mc_samples: 24,
            rho: vec![0.0, 0.08],
            n: vec![16, 32, 64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionConfig {
    Named(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub radius: f64,
    pub direction: DirectionConfig,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { radius: 0.08, direction: DirectionConfig::Named("adversarial".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_test: usize,
    pub posterior_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { n_test: 10_000, posterior_samples: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub base: u64,
    /// Seeds per sweep cell: `base, base + 1, …`.
    pub replicates: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { base: 0, replicates: 10 }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?
            .read_to_string(&mut text)?;
        Self::from_toml_str(&text)
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    ///
    /// Parsing into typed fields and serializing through sorted maps makes the
    /// hash independent of key order in the source file.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let value = serde_json::to_value(&canonical).expect("config is always serializable");
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// The configuration used throughout the double-integrator experiments.
    pub fn double_integrator() -> Self {
        Self {
            output_dir: default_output_dir(),
            plant: PlantConfig {
                a: vec![vec![1.0, 0.1], vec![0.0, 1.0]],
                b: vec![vec![0.0], vec![1.0]],
                horizon: 10,
            },
            weights: WeightsConfig {
                q: vec![vec![1.0, 0.0], vec![0.0, 0.1]],
                r: vec![vec![0.01]],
            },
            disturbance: DisturbanceConfig::Gaussian { mean: None, std: Some(0.02), covariance: None },
            bound: BoundConfig::default(),
            optimizer: OptimizerConfig::default(),
            shift: ShiftConfig::default(),
            evaluation: EvaluationConfig::default(),
            seeds: SeedConfig::default(),
        }
    }
}

fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Config(format!("`{name}` must be a nonempty matrix")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Config(format!("`{name}` row {i} has {} entries, expected {ncols}", rows[i].len())));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

pub fn method_label(rho: f64) -> &'static str {
    if rho == 0.0 {
        "vanilla"
    } else {
        "robust"
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Training = 1,
    MonteCarlo = 2,
    Test = 3,
    FreshTraining = 4,
}

/// Independent sub-seed for one purpose; shared by every ρ at the same `(seed, n)`.
fn derive_seed(seed: u64, n: usize, purpose: Purpose) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ n as u64) ^ purpose as u64)
}

/// Everything built once from a config and shared by all runs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub plant: LtiPlant,
    pub weights: CostWeights,
    pub constraints: LiftedConstraints,
    pub basis: SlsBasis,
    pub map: WeightedMapBasis,
    pub model: DisturbanceModel,
    pub prior: GaussianPrior,
    pub shift: ShiftSpec,
    config_hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let a = matrix("plant.a", &config.plant.a)?;
        let b = matrix("plant.b", &config.plant.b)?;
        if b.nrows() != a.nrows() {
            return Err(Error::Config(format!("`plant.b` has {} rows but `plant.a` is {}x{}", b.nrows(), a.nrows(), a.ncols())));
        }
        let plant = LtiPlant::new(a, b, config.plant.horizon).map_err(|e| Error::Config(e.to_string()))?;
        let weights = CostWeights::new(&plant, matrix("weights.q", &config.weights.q)?, matrix("weights.r", &config.weights.r)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        let w_dim = plant.w_dim();
        let model = match &config.disturbance {
            DisturbanceConfig::Gaussian { mean, std, covariance } => {
                let mean = match mean {
                    Some(m) if m.len() != w_dim => {
                        return Err(Error::Config(format!("`disturbance.mean` has {} entries, expected {w_dim}", m.len())))
                    }
                    Some(m) => DVector::from_vec(m.clone()),
                    None => DVector::zeros(w_dim),
                };
                let cov = match (covariance, std) {
                    (Some(c), _) => matrix("disturbance.covariance", c)?,
                    (None, Some(s)) if *s >= 0.0 => DMatrix::identity(w_dim, w_dim) * (s * s),
                    (None, Some(s)) => return Err(Error::Config(format!("`disturbance.std` must be >= 0, got {s}"))),
                    (None, None) => return Err(Error::Config("gaussian disturbance needs `std` or `covariance`".into())),
                };
                DisturbanceModel::gaussian(mean, cov).map_err(|e| Error::Config(e.to_string()))?
            }
            DisturbanceConfig::Bounded { radius } => {
                DisturbanceModel::bounded(w_dim, *radius).map_err(|e| Error::Config(e.to_string()))?
            }
        };
        let bound = &config.bound;
        if !(bound.delta > 0.0 && bound.delta < 1.0) {
            return Err(Error::Config(format!("`bound.delta` must lie in (0, 1), got {}", bound.delta)));
        }
        if let Some(r) = bound.rho.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("`bound.rho` entries must be finite and >= 0, got {r}")));
        }
        if let Some(n) = bound.n.iter().find(|n| **n < 2) {
            return Err(Error::Config(format!("`bound.n` entries must be >= 2, got {n}")));
        }
        if bound.mc_samples == 0 {
            return Err(Error::Config("`bound.mc_samples` must be >= 1".into()));
        }
        if config.evaluation.n_test == 0 || config.evaluation.posterior_samples == 0 {
            return Err(Error::Config("`evaluation` counts must be >= 1".into()));
        }
        config.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(bound.init_sigma > 0.0) {
            return Err(Error::Config("`bound.init_sigma` must be > 0".into()));
        }
        let prior = GaussianPrior::new(bound.sigma_prior).map_err(|e| Error::Config(e.to_string()))?;
        let direction = match &config.shift.direction {
            DirectionConfig::Named(name) if name == "adversarial" => ShiftDirection::Adversarial,
            DirectionConfig::Named(name) => {
                return Err(Error::Config(format!("unknown shift direction `{name}`, expected \"adversarial\" or a vector")))
            }
            DirectionConfig::Vector(v) if v.len() != w_dim => {
                return Err(Error::Config(format!("`shift.direction` has {} entries, expected {w_dim}", v.len())))
            }
            DirectionConfig::Vector(v) => ShiftDirection::Explicit(DVector::from_vec(v.clone())),
        };
        let shift = ShiftSpec::new(config.shift.radius, direction).map_err(|e| Error::Config(e.to_string()))?;

        let constraints = build_constraints(&plant);
        let basis = causal_basis(&plant, &constraints);
        let map = build_weighted_basis(&basis, &weights)?;
        let config_hash = config.hash();
        Ok(Self { config, plant, weights, constraints, basis, map, model, prior, shift, config_hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn training_sample(&self, n: usize, seed: u64, fresh: bool) -> Result<TrainingSample> {
        let purpose = if fresh { Purpose::FreshTraining } else { Purpose::Training };
        sample_training(&self.model, n, derive_seed(seed, n, purpose))
    }

    pub fn monte_carlo_plan(&self, n: usize, seed: u64) -> Result<MonteCarloPlan> {
        let run_seed = seed ^ splitmix(self.config.optimizer.seed);
        MonteCarloPlan::draw(self.basis.dim(), self.config.bound.mc_samples, derive_seed(run_seed, n, Purpose::MonteCarlo))
    }

    fn problem<'a>(&'a self, sample: &'a TrainingSample, rho: f64) -> BoundProblem<'a> {
        BoundProblem {
            map: &self.map,
            prior: self.prior,
            sample,
            model: &self.model,
            rho,
            delta: self.config.bound.delta,
        }
    }

    pub fn synthesize(&self) -> SynthesisSummary {
        let (phi_x, phi_u) = (&self.basis.phi0_x, &self.basis.phi0_u);
        SynthesisSummary {
            d: self.basis.dim(),
            w_dim: self.plant.w_dim(),
            u_dim: self.plant.u_dim(),
            map_shape: (self.map.rows(), self.map.w_dim()),
            baseline_residual: self.constraints.residual(phi_x, phi_u),
            nullspace_residual: crate::linalg::max_abs(&(&self.constraints.f * &self.basis.h)),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Fits one posterior at `(n, ρ)` and evaluates it on nominal and shifted test data.
    pub fn run_cell(&self, n: usize, rho: f64, seed: u64) -> Result<CellResult> {
        let sample = self.training_sample(n, seed, false)?;
        let plan = self.monte_carlo_plan(n, seed)?;
        let init = initialize_posterior(&self.basis, InitStrategy::Zeros, self.config.bound.init_sigma)?;
        let fit = fit_posterior(&self.problem(&sample, rho), &plan, &init, &self.config.optimizer)?;
        let (nominal, shifted) = self.evaluate(&fit.posterior, n, seed)?;
        Ok(CellResult { n, rho, seed, fit, nominal, shifted })
    }

    /// Test risk on the nominal model and on the configured shift of it.
    pub fn evaluate(&self, posterior: &GaussianPosterior, n: usize, seed: u64) -> Result<(TestReport, TestReport)> {
        let eval = &self.config.evaluation;
        let test_seed = derive_seed(seed, n, Purpose::Test);
        let nominal = test_risk(&self.map, posterior, &self.model, eval.n_test, eval.posterior_samples, test_seed)?;
        let deployed = shifted_model(&self.model, &self.shift, &self.map, &posterior.mu)?;
        let shifted = test_risk(&self.map, posterior, &deployed, eval.n_test, eval.posterior_samples, test_seed)?;
        Ok((nominal, shifted))
    }

    /// Recomputes the certificate of a stored posterior.
    ///
    /// `fresh = false` regenerates the training sample the posterior was fitted on.
    pub fn certify(&self, posterior: &GaussianPosterior, n: usize, rho: f64, seed: u64, fresh: bool) -> Result<CertificateBreakdown> {
        if posterior.dim() != self.basis.dim() {
            return Err(Error::Config(format!(
                "posterior has {} mean entries but the parameterization has d = {}",
                posterior.dim(),
                self.basis.dim()
            )));
        }
        let sample = self.training_sample(n, seed, fresh)?;
        let plan = self.monte_carlo_plan(n, seed)?;
        Ok(robust_objective(&self.problem(&sample, rho), posterior, &plan)?.breakdown)
    }

    /// Writes posterior, trace and certificate files for one `(n, ρ)` run.
    pub fn optimize(&self, n: usize, rho: f64, seed: u64, out_dir: &Path) -> Result<(CellResult, RunManifest)> {
        let start = Instant::now();
        let cell = self.run_cell(n, rho, seed)?;
        let elapsed = start.elapsed().as_secs_f64();
        fs::create_dir_all(out_dir)?;
        let tag = format!("{n}_{rho}");
        let posterior_path = out_dir.join(format!("posterior_{tag}.csv"));
        let trace_path = out_dir.join(format!("trace_{tag}.csv"));
        let cert_path = out_dir.join(format!("certificate_{tag}.csv"));
        write_posterior_csv(&posterior_path, &cell.fit.posterior)?;
        cell.fit.trace.write_csv(BufWriter::new(File::create(&trace_path)?))?;
        write_rows(&cert_path, &[self.sweep_row(&cell)])?;

        let mut manifest = RunManifest::new("optimize", self, seed);
        manifest.outputs = vec![posterior_path, trace_path, cert_path];
        manifest.wall_clock_seconds.insert(format!("optimize_{tag}"), elapsed);
        manifest.write(&out_dir.join("manifest.json"))?;
        Ok((cell, manifest))
    }

    /// Every `(n, ρ, replicate)` cell, in that order; cells run on at most `workers` threads.
    pub fn sweep(&self, seed: u64, workers: usize) -> Result<(Vec<SweepRow>, BTreeMap<String, f64>)> {
        let bound = &self.config.bound;
        let replicates: Vec<u64> = (0..self.config.seeds.replicates).map(|r| seed.wrapping_add(r)).collect();
        let jobs: Vec<(usize, u64)> = bound
            .n
            .iter()
            .flat_map(|&n| replicates.iter().map(move |&s| (n, s)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let results: Vec<Result<(Vec<CellResult>, f64)>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(n, s)| {
                    let start = Instant::now();
                    let cells = bound.rho.iter().map(|&rho| self.run_cell(n, rho, s)).collect::<Result<Vec<_>>>()?;
                    Ok((cells, start.elapsed().as_secs_f64()))
                })
                .collect()
        });

        let mut timings = BTreeMap::new();
        let mut by_key = BTreeMap::new();
        for (&(n, s), result) in jobs.iter().zip(results) {
            let (cells, secs) = result?;
            timings.insert(format!("n={n} seed={s}"), secs);
            for (rho_index, cell) in cells.into_iter().enumerate() {
                let n_index = bound.n.iter().position(|&v| v == n).unwrap_or(0);
                by_key.insert((n_index, rho_index, s), self.sweep_row(&cell));
            }
        }
        Ok((by_key.into_values().collect(), timings))
    }

    pub fn sweep_row(&self, cell: &CellResult) -> SweepRow {
        let b = &cell.fit.breakdown;
        SweepRow {
            n: cell.n,
            rho: cell.rho,
            gibbs_risk: b.gibbs_empirical_risk,
            w1_penalty: b.wasserstein_penalty,
            complexity: b.complexity,
            total_bound: b.total_bound,
            test_risk_nominal: cell.nominal.mean_test_risk,
            test_risk_shifted: cell.shifted.mean_test_risk,
            seed: cell.seed,
            method: method_label(cell.rho).to_string(),
            test_se_nominal: cell.nominal.std_error,
            test_se_shifted: cell.shifted.std_error,
            rho_shift: self.shift.shift_radius,
            kl: b.kl,
            sigma_q: cell.fit.posterior.sigma(),
            expected_lipschitz: b.expected_lipschitz,
            iterations: cell.fit.trace.rows.len().saturating_sub(1),
            termination: cell.fit.trace.termination,
            config_hash: self.config_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisSummary {
    pub d: usize,
    pub w_dim: usize,
    pub u_dim: usize,
    pub map_shape: (usize, usize),
    pub baseline_residual: f64,
    pub nullspace_residual: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
    pub fit: PosteriorFit,
    pub nominal: TestReport,
    pub shifted: TestReport,
}

/// One line of `sweep.csv`. The first nine columns are the plotting schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub rho: f64,
    pub gibbs_risk: f64,
    pub w1_penalty: f64,
    pub complexity: f64,
    pub total_bound: f64,
    pub test_risk_nominal: f64,
    pub test_risk_shifted: f64,
    pub seed: u64,
    pub method: String,
    pub test_se_nominal: f64,
    pub test_se_shifted: f64,
    pub rho_shift: f64,
    pub kl: f64,
    pub sigma_q: f64,
    pub expected_lipschitz: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub config_hash: String,
}

/// Across-seed means and standard errors of one `(n, ρ)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub rho: f64,
    pub method: String,
    pub seeds: usize,
    pub gibbs_risk: f64,
    pub w1_penalty: f64,
    pub complexity: f64,
    pub total_bound: f64,
    pub total_bound_se: f64,
    pub test_risk_nominal: f64,
    pub test_risk_nominal_se: f64,
    pub test_risk_shifted: f64,
    pub test_risk_shifted_se: f64,
    /// Fraction of seeds whose bound is at least the shifted test risk.
    pub shifted_coverage: f64,
    pub config_hash: String,
}

fn mean_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let k = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / k;
    if k < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Groups sweep rows by `(n, ρ)`, keeping first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.n, r.rho)) {
            keys.push((r.n, r.rho));
        }
    }
    keys.into_iter()
        .map(|(n, rho)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.n == n && r.rho == rho).collect();
            let col = |f: fn(&SweepRow) -> f64| cell.iter().map(move |r| f(r));
            let (total_bound, total_bound_se) = mean_se(col(|r| r.total_bound));
            let (test_risk_nominal, test_risk_nominal_se) = mean_se(col(|r| r.test_risk_nominal));
            let (test_risk_shifted, test_risk_shifted_se) = mean_se(col(|r| r.test_risk_shifted));
            let covered = cell.iter().filter(|r| r.total_bound >= r.test_risk_shifted).count();
            SummaryRow {
                n,
                rho,
                method: method_label(rho).to_string(),
                seeds: cell.len(),
                gibbs_risk: mean_se(col(|r| r.gibbs_risk)).0,
                w1_penalty: mean_se(col(|r| r.w1_penalty)).0,
                complexity: mean_se(col(|r| r.complexity)).0,
                total_bound,
                total_bound_se,
                test_risk_nominal,
                test_risk_nominal_se,
                test_risk_shifted,
                test_risk_shifted_se,
                shifted_coverage: covered as f64 / cell.len() as f64,
                config_hash: cell[0].config_hash.clone(),
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ParameterRow {
    parameter: String,
    value: f64,
}

/// `parameter,value` rows: `mu_0 … mu_{d-1}` followed by `log_sigma`.
pub fn write_posterior_csv(path: &Path, posterior: &GaussianPosterior) -> Result<()> {
    let mut rows: Vec<ParameterRow> = posterior
        .mu
        .iter()
        .enumerate()
        .map(|(i, &value)| ParameterRow { parameter: format!("mu_{i}"), value })
        .collect();
    rows.push(ParameterRow { parameter: "log_sigma".into(), value: posterior.log_sigma });
    write_rows(path, &rows)
}

pub fn read_posterior_csv(path: &Path) -> Result<GaussianPosterior> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: Vec<ParameterRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let Some((last, means)) = rows.split_last() else {
        return Err(Error::Config(format!("{} holds no parameters", path.display())));
    };
    if last.parameter != "log_sigma" {
        return Err(Error::Config(format!("{}: last row must be `log_sigma`, found `{}`", path.display(), last.parameter)));
    }
    for (i, row) in means.iter().enumerate() {
        if row.parameter != format!("mu_{i}") {
            return Err(Error::Config(format!("{}: expected `mu_{i}`, found `{}`", path.display(), row.parameter)));
        }
    }
    GaussianPosterior::new(DVector::from_iterator(means.len(), means.iter().map(|r| r.value)), last.value)
}

/// Sentence stating what a breakdown certifies.
pub fn guarantee_sentence(b: &CertificateBreakdown) -> String {
    let confidence = 100.0 * (1.0 - b.delta);
    if b.rho == 0.0 {
        format!(
            "With probability at least {confidence}% over the {} training trajectories, the posterior-averaged expected cost under the training disturbance distribution is at most {:.6}.",
            b.n, b.total_bound
        )
    } else {
        format!(
            "With probability at least {confidence}% over the {} training trajectories, the posterior-averaged worst-case expected cost over every disturbance distribution within 1-Wasserstein distance {} of the training distribution is at most {:.6}.",
            b.n, b.rho, b.total_bound
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, experiment: &Experiment, seed: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: experiment.config_hash.clone(),
            seed,
            config: experiment.config.clone(),
            outputs: Vec::new(),
            wall_clock_seconds: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Runs the sweep and writes `sweep.csv`, `sweep_summary.csv` and `manifest.json` into `out_dir`.
pub fn run_sweep(experiment: &Experiment, seed: u64, workers: usize, out_dir: &Path) -> Result<(Vec<SweepRow>, RunManifest)> {
    let start = Instant::now();
    let (rows, timings) = experiment.sweep(seed, workers)?;
    fs::create_dir_all(out_dir)?;
    let sweep_path = out_dir.join("sweep.csv");
    write_rows(&sweep_path, &rows)?;
    let summary_path = out_dir.join("sweep_summary.csv");
    write_rows(&summary_path, &summarize(&rows))?;
    let mut manifest = RunManifest::new("sweep", experiment, seed);
    manifest.outputs = vec![sweep_path, summary_path];
    manifest.wall_clock_seconds = timings;
    manifest.wall_clock_seconds.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok((rows, manifest))
}
