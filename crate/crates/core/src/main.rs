use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slspac::experiment::{
    guarantee_sentence, method_label, read_posterior_csv, run_sweep, write_rows, Experiment, ExperimentConfig,
    RunManifest,
};
use slspac::Result;

#[derive(Parser)]
#[command(name = "slspac", version, about = "Distributionally robust PAC-Bayesian controller synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the lifted constraints and causal parameterization, print its dimensions.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one posterior and write posterior, trace and certificate files.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit and evaluate every (n, rho, seed) cell, writing sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Rerun exactly the sweep recorded in a manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        seed: Option<u64>,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        /// Replicates per (n, rho) cell.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        rho_list: Option<Vec<f64>>,
    },
    /// Recompute the certificate of a stored posterior.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Certify on a newly drawn sample instead of the one used for fitting.
        #[arg(long)]
        fresh: bool,
    },
    /// Estimate nominal and shifted test risk of a stored posterior.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_test: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    shift_radius: Option<f64>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

impl Common {
    fn load(&self, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut config = match (base, &self.config) {
            (Some(c), _) => c,
            (None, Some(path)) => ExperimentConfig::load(path)?,
            (None, None) => ExperimentConfig::double_integrator(),
        };
        if let Some(dir) = &self.output {
            config.output_dir = dir.clone();
        }
        if let Some(v) = self.max_iterations {
            config.optimizer.max_iterations = v;
        }
        if let Some(v) = self.mc_samples {
            config.bound.mc_samples = v;
        }
        if let Some(v) = self.delta {
            config.bound.delta = v;
        }
        if let Some(v) = self.shift_radius {
            config.shift.radius = v;
        }
        Ok(config)
    }
}

#[derive(serde::Serialize)]
struct EvaluationRow<'a> {
    n: usize,
    rho: f64,
    rho_shift: f64,
    method: &'a str,
    distribution: &'a str,
    mean_test_risk: f64,
    std_error: f64,
    n_test: usize,
    m_posterior: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize { common } => {
            let exp = Experiment::new(common.load(None)?)?;
            let s = exp.synthesize();
            println!("config_hash        {}", s.config_hash);
            println!("parameters d       {}", s.d);
            println!("disturbance dim    {}", s.w_dim);
            println!("input dim          {}", s.u_dim);
            println!("weighted map       {} x {}", s.map_shape.0, s.map_shape.1);
            println!("baseline residual  {:.3e}", s.baseline_residual);
            println!("basis residual     {:.3e}", s.nullspace_residual);
        }
        Command::Optimize { common, n, rho, seed } => {
            let exp = Experiment::new(common.load(None)?)?;
            let out = exp.config.output_dir.clone();
            let (cell, _) = exp.optimize(n, rho, seed, &out)?;
            let b = &cell.fit.breakdown;
            println!(
                "{} n={n} rho={rho}: gibbs={:.6} w1={:.6} complexity={:.6} bound={:.6} termination={:?}",
                method_label(rho),
                b.gibbs_empirical_risk,
                b.wasserstein_penalty,
                b.complexity,
                b.total_bound,
                cell.fit.trace.termination
            );
            println!("{}", guarantee_sentence(b));
            println!("wrote {}", out.display());
        }
        Command::Sweep { common, manifest, seed, workers, seeds, n_list, rho_list } => {
            let (base, seed) = match &manifest {
                Some(path) => {
                    let m = RunManifest::load(path)?;
                    (Some(m.config), seed.unwrap_or(m.seed))
                }
                None => (None, seed.expect("clap requires --seed without --manifest")),
            };
            let mut config = common.load(base)?;
            if let Some(v) = seeds {
                config.seeds.replicates = v;
            }
            if let Some(v) = n_list {
                config.bound.n = v;
            }
            if let Some(v) = rho_list {
                config.bound.rho = v;
            }
            let exp = Experiment::new(config)?;
            let out = exp.config.output_dir.clone();
            let (rows, _) = run_sweep(&exp, seed, workers, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::Certify { common, posterior, n, rho, seed, fresh } => {
            let exp = Experiment::new(common.load(None)?)?;
            let q = read_posterior_csv(&posterior)?;
            let b = exp.certify(&q, n, rho, seed, fresh)?;
            let sample = if fresh { "fresh" } else { "stored" };
            println!(
                "{sample} sample: gibbs={:.6} w1={:.6} complexity={:.6} bound={:.6} kl={:.6}",
                b.gibbs_empirical_risk, b.wasserstein_penalty, b.complexity, b.total_bound, b.kl
            );
            println!("{}", guarantee_sentence(&b));
        }
        Command::Evaluate { common, posterior, n, rho, seed, n_test } => {
            let mut config = common.load(None)?;
            if let Some(v) = n_test {
                config.evaluation.n_test = v;
            }
            let exp = Experiment::new(config)?;
            let q = read_posterior_csv(&posterior)?;
            let (nominal, shifted) = exp.evaluate(&q, n, seed)?;
            let row = |distribution, r: &slspac::lab::TestReport| EvaluationRow {
                n,
                rho,
                rho_shift: exp.shift.shift_radius,
                method: method_label(rho),
                distribution,
                mean_test_risk: r.mean_test_risk,
                std_error: r.std_error,
                n_test: r.n_test,
                m_posterior: r.m_posterior,
            };
            let out = exp.config.output_dir.clone();
            std::fs::create_dir_all(&out)?;
            let path: &Path = &out.join(format!("evaluation_{n}_{rho}.csv"));
            write_rows(path, &[row("nominal", &nominal), row("shifted", &shifted)])?;
            println!(
                "nominal {:.6} ± {:.6}  shifted {:.6} ± {:.6}",
                nominal.mean_test_risk, nominal.std_error, shifted.mean_test_risk, shifted.std_error
            );
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
