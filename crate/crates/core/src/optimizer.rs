//! Limited-memory quasi-Newton minimization of the robust bound over `(μ, log σ_q)`.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bound::{robust_objective, BoundProblem, CertificateBreakdown, GaussianPosterior, MonteCarloPlan};
use crate::error::{dim_err, Error, Result};
use crate::sls::SlsBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop once `‖∇f‖_∞` falls to this level.
    pub gradient_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Number of `(s, y)` pairs kept for the inverse-Hessian approximation.
    pub memory: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 150,
            gradient_tolerance: 1e-6,
            sufficient_decrease: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            memory: 10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| Err(Error::InvalidArgument { name, reason: reason.into() });
        if self.max_iterations == 0 {
            return bad("max_iterations", "must be at least 1");
        }
        if !(self.gradient_tolerance > 0.0) {
            return bad("gradient_tolerance", "must be > 0");
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return bad("sufficient_decrease", "must lie in (0, 1)");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor", "must lie in (0, 1)");
        }
        if self.max_backtracks == 0 {
            return bad("max_backtracks", "must be at least 1");
        }
        if self.memory == 0 {
            return bad("memory", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

/// One objective evaluation with caller-defined diagnostics.
#[derive(Debug, Clone)]
pub struct Evaluation<I> {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub info: I,
}

#[derive(Debug, Clone)]
pub struct IterationRecord<I> {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    /// Accepted step length along the search direction; zero for the initial point.
    pub step: f64,
    pub info: I,
}

#[derive(Debug, Clone)]
pub struct Minimization<I> {
    pub x: DVector<f64>,
    pub best: Evaluation<I>,
    /// The initial point followed by every accepted iterate.
    pub records: Vec<IterationRecord<I>>,
    pub termination: Termination,
}

struct History {
    pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn push(&mut self, s: DVector<f64>, y: DVector<f64>) {
        let sy = s.dot(&y);
        if sy <= 1e-12 * s.norm() * y.norm() || !sy.is_finite() {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion for `−H g`.
    fn direction(&self, g: &DVector<f64>) -> DVector<f64> {
        let Some((s_last, y_last, _)) = self.pairs.back() else {
            return steepest(g);
        };
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, r) in self.pairs.iter().rev() {
            let a = r * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        q *= s_last.dot(y_last) / y_last.norm_squared();
        for ((s, y, r), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = r * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        -q
    }
}

fn steepest(g: &DVector<f64>) -> DVector<f64> {
    let norm = g.norm();
    -g * if norm > 1.0 { 1.0 / norm } else { 1.0 }
}

fn is_finite(e: &Evaluation<impl Sized>) -> bool {
    e.value.is_finite() && e.gradient.iter().all(|v| v.is_finite())
}

/// L-BFGS with backtracking Armijo line search.
///
/// A failed line search along the quasi-Newton direction clears the history
/// and retries along the steepest-descent direction once; a second failure
/// terminates. Accepted iterates strictly decrease the objective.
pub fn minimize<I, F>(mut objective: F, x0: DVector<f64>, config: &OptimizerConfig) -> Result<Minimization<I>>
where
    I: Clone,
    F: FnMut(&DVector<f64>) -> Result<Evaluation<I>>,
{
    config.validate()?;
    let mut current = objective(&x0)?;
    if !current.value.is_finite() {
        return Err(Error::NonFinite { term: "objective".into() });
    }
    if current.gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "gradient".into() });
    }
    if current.gradient.len() != x0.len() {
        return Err(dim_err("gradient", x0.len(), current.gradient.len()));
    }
    let mut x = x0;
    let mut records = vec![IterationRecord {
        iteration: 0,
        value: current.value,
        grad_norm: current.gradient.amax(),
        step: 0.0,
        info: current.info.clone(),
    }];
    let mut history = History { pairs: VecDeque::new(), capacity: config.memory };
    let mut termination = Termination::MaxIterations;

    for iteration in 1..=config.max_iterations {
        if current.gradient.amax() <= config.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut from_history = !history.pairs.is_empty();
        let mut direction = history.direction(&current.gradient);
        let mut slope = current.gradient.dot(&direction);
        if !(slope < 0.0) {
            history.pairs.clear();
            from_history = false;
            direction = steepest(&current.gradient);
            slope = current.gradient.dot(&direction);
        }
        let mut accepted = line_search(&mut objective, &x, &current, &direction, slope, config)?;
        if accepted.is_none() && from_history {
            history.pairs.clear();
            let direction = steepest(&current.gradient);
            let slope = current.gradient.dot(&direction);
            accepted = line_search(&mut objective, &x, &current, &direction, slope, config)?;
        }
        let Some((step, x_new, next)) = accepted else {
            termination = Termination::LineSearchFailure;
            break;
        };
        history.push(&x_new - &x, &next.gradient - &current.gradient);
        x = x_new;
        current = next;
        records.push(IterationRecord {
            iteration,
            value: current.value,
            grad_norm: current.gradient.amax(),
            step,
            info: current.info.clone(),
        });
        if iteration == config.max_iterations && current.gradient.amax() <= config.gradient_tolerance {
            termination = Termination::GradientTolerance;
        }
    }

    Ok(Minimization { x, best: current, records, termination })
}

type Accepted<I> = (f64, DVector<f64>, Evaluation<I>);

fn line_search<I, F>(
    objective: &mut F,
    x: &DVector<f64>,
    current: &Evaluation<I>,
    direction: &DVector<f64>,
    slope: f64,
    config: &OptimizerConfig,
) -> Result<Option<Accepted<I>>>
where
    F: FnMut(&DVector<f64>) -> Result<Evaluation<I>>,
{
    let mut step = 1.0;
    for _ in 0..config.max_backtracks {
        let trial = x + direction * step;
        let eval = objective(&trial)?;
        if is_finite(&eval) && eval.value <= current.value + config.sufficient_decrease * step * slope && eval.value < current.value {
            return Ok(Some((step, trial, eval)));
        }
        step *= config.backtrack_factor;
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// `μ = 0`.
    Zeros,
    /// The open-loop closed loop, which is `θ = 0` in the unit-impulse basis.
    OpenLoopBaseline,
}

pub fn initialize_posterior(basis: &SlsBasis, strategy: InitStrategy, init_sigma: f64) -> Result<GaussianPosterior> {
    if !(init_sigma > 0.0) || !init_sigma.is_finite() {
        return Err(Error::InvalidArgument {
            name: "init_sigma",
            reason: format!("must be finite and > 0, got {init_sigma}"),
        });
    }
    let mu = match strategy {
        InitStrategy::Zeros | InitStrategy::OpenLoopBaseline => DVector::zeros(basis.dim()),
    };
    GaussianPosterior::new(mu, init_sigma.ln())
}

/// Warm start from a given mean, checked against the basis dimension.
pub fn posterior_from_mean(basis: &SlsBasis, mu: DVector<f64>, init_sigma: f64) -> Result<GaussianPosterior> {
    if mu.len() != basis.dim() {
        return Err(dim_err("posterior mean", basis.dim(), mu.len()));
    }
    GaussianPosterior::new(mu, init_sigma.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub gibbs_risk: f64,
    pub w1_penalty: f64,
    pub complexity: f64,
    pub step: f64,
    pub degenerate_count: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
}

impl OptimizationTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub posterior: GaussianPosterior,
    pub breakdown: CertificateBreakdown,
    pub trace: OptimizationTrace,
}

/// Minimizes the robust bound starting from `init`, with the plan frozen for the whole run.
pub fn fit_posterior(
    problem: &BoundProblem<'_>,
    plan: &MonteCarloPlan,
    init: &GaussianPosterior,
    config: &OptimizerConfig,
) -> Result<PosteriorFit> {
    let initial = robust_objective(problem, init, plan)?;
    let b = &initial.breakdown;
    for (term, value) in [
        ("gibbs_empirical_risk", b.gibbs_empirical_risk),
        ("wasserstein_penalty", b.wasserstein_penalty),
        ("complexity", b.complexity),
        ("kl", b.kl),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term: term.into() });
        }
    }
    if initial.gradient().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "gradient".into() });
    }

    let eval = |params: &DVector<f64>| -> Result<Evaluation<(CertificateBreakdown, usize)>> {
        let posterior = GaussianPosterior {
            mu: params.rows(0, params.len() - 1).into_owned(),
            log_sigma: params[params.len() - 1],
        };
        let value = robust_objective(problem, &posterior, plan)?;
        Ok(Evaluation {
            value: value.breakdown.total_bound,
            gradient: value.gradient(),
            info: (value.breakdown, value.degenerate_count),
        })
    };
    let result = minimize(eval, init.to_params(), config)?;
    let rows = result
        .records
        .iter()
        .map(|r| TraceRow {
            iteration: r.iteration,
            objective: r.value,
            grad_norm: r.grad_norm,
            gibbs_risk: r.info.0.gibbs_empirical_risk,
            w1_penalty: r.info.0.wasserstein_penalty,
            complexity: r.info.0.complexity,
            step: r.step,
            degenerate_count: r.info.1,
        })
        .collect::<Vec<TraceRow>>();
    let degenerate: usize = rows.iter().map(|r| r.degenerate_count).sum();
    if degenerate > 0 {
        log::warn!("{degenerate} Monte-Carlo evaluations used a subgradient at a repeated top singular value");
    }
    if result.termination != Termination::GradientTolerance {
        log::info!("optimizer stopped by {:?} after {} iterations", result.termination, rows.len() - 1);
    }
    Ok(PosteriorFit {
        posterior: GaussianPosterior::from_params(&result.x)?,
        breakdown: result.best.info.0,
        trace: OptimizationTrace { rows, termination: result.termination },
    })
}
