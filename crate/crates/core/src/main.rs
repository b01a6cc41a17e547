use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use gp_penalty::bench::TestFunction;
use gp_penalty::penalty::PenaltySpec;
use gp_penalty::study::{self, RunConfig};
use gp_penalty::tuning::MetricKind;
use gp_penalty::Error;

/// Penalized Gaussian-process surrogates with cross-validated penalty selection.
///
/// Exit codes: 0 success, 1 invalid arguments, 2 I/O failure, 3 malformed
/// dataset, 4 no selectable lambda, 5 optimization failure, 6 other numeric
/// failure.
#[derive(Debug, Parser)]
#[command(name = "gp-penalty", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile likelihoods, lambda path and predictive curves for sine or forrester.
    Demo {
        #[arg(long, value_enum)]
        function: Function,
        #[command(flatten)]
        common: Common,
    },
    /// K-fold cross-validation over a lambda grid on a dataset CSV (x1..xd,y).
    Cv {
        /// Dataset CSV in natural units.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "dpe")]
        metric: Metric,
        /// Number of folds; equal to the number of rows for leave-one-out.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Select the largest lambda within one standard error of the minimum.
        #[arg(long)]
        use_1se: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Repeated train/test simulation on a benchmark function.
    SimStudy {
        #[arg(long, value_enum)]
        function: Function,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// MLE, leave-one-out PE and repeated 4-fold CV on the piston slap data.
    Piston {
        #[arg(long, default_value_t = 100)]
        reps: usize,
        /// Optional test set CSV with 6 inputs; without it fits are compared by
        /// leave-one-out RMSE.
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Writes the training (and test) design of a benchmark function as CSV.
    Dataset {
        #[arg(long, value_enum)]
        function: Function,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated lambda values, or "default".
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "lasso")]
    penalty: Penalty,
    #[arg(long, default_value_t = 0.001)]
    theta_lo: f64,
    /// Upper lengthscale bound; defaults to 100 for demo, 1000 otherwise.
    #[arg(long)]
    theta_hi: Option<f64>,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = gp_penalty::gp::DEFAULT_NUGGET)]
    nugget: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Function {
    Sine,
    Forrester,
    Lim,
    Franke,
    #[value(name = "piston_sim", alias = "piston-sim")]
    PistonSim,
    Borehole,
}

impl From<Function> for TestFunction {
    fn from(f: Function) -> Self {
        match f {
            Function::Sine => TestFunction::Sine,
            Function::Forrester => TestFunction::Forrester,
            Function::Lim => TestFunction::Lim,
            Function::Franke => TestFunction::Franke,
            Function::PistonSim => TestFunction::PistonSim,
            Function::Borehole => TestFunction::Borehole,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Pe,
    Md,
    Score,
    Dpe,
}

impl From<Metric> for MetricKind {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Pe => MetricKind::Pe,
            Metric::Md => MetricKind::Md,
            Metric::Score => MetricKind::Score,
            Metric::Dpe => MetricKind::Dpe,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Penalty {
    Lasso,
    Scad,
}

impl Common {
    fn run_config(&self, default_hi: f64) -> Result<RunConfig, Error> {
        let mut run = RunConfig {
            nugget: self.nugget,
            grid: study::parse_grid(&self.grid)?,
            ..RunConfig::default()
        };
        run.penalty = match self.penalty {
            Penalty::Lasso => PenaltySpec::lasso(0.0),
            Penalty::Scad => PenaltySpec::scad(0.0),
        };
        run.optim.theta_lo = self.theta_lo;
        run.optim.theta_hi = self.theta_hi.unwrap_or(default_hi);
        run.optim.n_starts = self.starts;
        run.optim.seed = self.seed;
        run.validate()?;
        Ok(run)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
        Error::MalformedData { .. } => 3,
        Error::Selection(_) => 4,
        Error::OptimizationFailed { .. } => 5,
        Error::NotPositiveDefinite { .. } | Error::Numeric(_) => 6,
        Error::InvalidDesign(_) | Error::EmptyData | Error::Domain(_) | Error::Shape(_) => 1,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("GP_PENALTY_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("GP_PENALTY_THREADS must be a positive integer, got '{value}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Demo { function, common } => {
            let run = common.run_config(100.0)?;
            let s = study::cmd_demo(function.into(), &run, &common.out)?;
            println!(
                "mle theta = {:?}; lambda {} theta = {:?}",
                s.mle.theta_hat, s.penalized.lambda, s.penalized.theta_hat
            );
        }
        Command::Cv {
            data,
            metric,
            k,
            use_1se,
            common,
        } => {
            let run = common.run_config(gp_penalty::gp::DEFAULT_THETA_HI)?;
            let s = study::cmd_cv(&data, metric.into(), k, use_1se, &run, &common.out)?;
            println!("{}", s.selected_lambda);
        }
        Command::SimStudy {
            function,
            reps,
            common,
        } => {
            let run = common.run_config(gp_penalty::gp::DEFAULT_THETA_HI)?;
            let report = study::cmd_sim_study(function.into(), reps, &run, &common.out)?;
            for s in &report.summaries {
                println!(
                    "{:<8} median rmse {:.4}  median sqrt rel rmse {:.4}",
                    s.method, s.median_rmse, s.median_sqrt_rel_rmse
                );
            }
        }
        Command::Piston { reps, test, common } => {
            let run = common.run_config(gp_penalty::gp::DEFAULT_THETA_HI)?;
            let report = study::cmd_piston(reps, test.as_deref(), &run, &common.out)?;
            for t in &report.tally {
                println!(
                    "{:<8} {:<8} {}",
                    t.metric,
                    format!("{:?}", t.outcome).to_lowercase(),
                    t.count
                );
            }
        }
        Command::Dataset { function, common } => {
            for p in study::cmd_dataset(function.into(), common.seed, &common.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
