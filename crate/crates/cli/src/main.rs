//! `netload` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime or numerical failure, 2 on usage
//! or configuration errors.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use netload::report;
use netload::signal::{optimize, sample_feasible_plan, ObjectiveModel};
use netload::{monte_carlo, run_deterministic_baseline, run_loading, scenarios, Error, Network, NetworkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "netload", version, about = "Stochastic network loading and signal optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the analytical network model.
    Analytic(RunArgs),
    /// Run Monte-Carlo replications of the event simulator.
    Simulate(RunArgs),
    /// Run the deterministic link transmission model.
    Baseline(RunArgs),
    /// Compare the expected queues of two trajectory files.
    Compare {
        first: PathBuf,
        second: PathBuf,
        /// Also write the table to DIR/compare.csv.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Optimize green splits from a random feasible plan.
    Optimize(RunArgs),
    /// Bundled scenarios.
    Scenarios {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(Subcommand)]
enum ScenarioAction {
    /// List the bundled scenarios.
    List,
    /// Print a bundled scenario file.
    Show { name: String },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Analytic,
    Baseline,
    Mc,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, value_name = "PATH")]
    config: String,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    replications: u64,
    #[arg(long, value_name = "N")]
    horizon_s: Option<f64>,
    #[arg(long, value_name = "N")]
    stride_s: Option<f64>,
    /// Objective model for `optimize`.
    #[arg(long, value_enum, default_value = "analytic")]
    model: ModelArg,
    /// Mixture weight applied to every link.
    #[arg(long, value_name = "W")]
    weight: Option<f64>,
    /// Maximum objective evaluations for `optimize`.
    #[arg(long, value_name = "N", default_value_t = 200)]
    budget: usize,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Argument(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::Internal(_) | Error::Io(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn load_config(args: &RunArgs) -> Result<NetworkConfig, Failure> {
    let path = Path::new(&args.config);
    let mut cfg = if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        NetworkConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else if let Some(text) = scenarios::source(&args.config) {
        NetworkConfig::from_json(text)?
    } else {
        return Err(usage(format!("scenario file {} not found (and no bundled scenario of that name)", args.config)));
    };
    if let Some(h) = args.horizon_s {
        cfg.horizon_s = h;
    }
    if let Some(s) = args.stride_s {
        cfg.output_stride_s = s;
    }
    if let Some(w) = args.weight {
        if !(0.0..=1.0).contains(&w) {
            return Err(usage(format!("--weight {w} is outside [0, 1]")));
        }
        cfg.override_weight(w);
    }
    Ok(cfg)
}

fn compile(args: &RunArgs) -> Result<Network, Failure> {
    let cfg = load_config(args)?;
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(usage(format!("invalid scenario:\n  {}", issues.join("\n  "))));
    }
    Ok(cfg.compile()?)
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    Ok((path, BufWriter::new(file)))
}

fn finish(path: PathBuf, mut w: BufWriter<File>) -> Result<(), Failure> {
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Analytic(args) => {
            let net = compile(&args)?;
            let traj = run_loading(&net)?;
            let (path, mut w) = create(&args.out, "analytic.csv")?;
            report::write_trajectory_csv(&mut w, &traj)?;
            finish(path, w)
        }
        Command::Simulate(args) => {
            let net = compile(&args)?;
            let mc = monte_carlo(&net, args.replications as usize, args.seed)?;
            let (path, mut w) = create(&args.out, "simulate.csv")?;
            report::write_monte_carlo_csv(&mut w, &mc)?;
            finish(path, w)
        }
        Command::Baseline(args) => {
            let net = compile(&args)?;
            let counts = run_deterministic_baseline(&net)?;
            let (path, mut w) = create(&args.out, "baseline.csv")?;
            report::write_baseline_csv(&mut w, &counts)?;
            finish(path, w)
        }
        Command::Compare { first, second, out } => {
            let read = |p: &Path| -> Result<report::QueueSeries, Failure> {
                let file = File::open(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
                Ok(report::read_queue_series(file)?)
            };
            let rows = report::compare(&read(&first)?, &read(&second)?)?;
            let stdout = io::stdout();
            report::write_comparison_csv(stdout.lock(), &rows)?;
            if let Some(dir) = out {
                let (path, mut w) = create(&dir, "compare.csv")?;
                report::write_comparison_csv(&mut w, &rows)?;
                finish(path, w)?;
            }
            Ok(())
        }
        Command::Optimize(args) => {
            let net = compile(&args)?;
            let signals = net
                .signals
                .clone()
                .ok_or_else(|| usage("scenario has no signal section"))?;
            let model = match args.model {
                ModelArg::Analytic => ObjectiveModel::Analytical,
                ModelArg::Baseline => ObjectiveModel::Deterministic,
                ModelArg::Mc => ObjectiveModel::MonteCarlo {
                    replications: args.replications as usize,
                    seed: args.seed,
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let initial = sample_feasible_plan(&signals, &mut rng)?;
            let outcome = optimize(&initial, model, &net, args.budget)?;
            let (path, mut w) = create(&args.out, "trace.csv")?;
            report::write_trace_csv(&mut w, &outcome, &signals)?;
            finish(path, w)?;
            let (path, mut w) = create(&args.out, "summary.csv")?;
            report::write_optimization_summary(&mut w, &outcome)?;
            finish(path, w)?;
            println!(
                "objective {} -> {} in {} evaluations",
                outcome.initial_objective,
                outcome.best_objective,
                outcome.evaluations()
            );
            Ok(())
        }
        Command::Scenarios { action: ScenarioAction::List } => {
            for name in scenarios::names() {
                let cfg = scenarios::load(name)?;
                println!("{name:<14} {}", cfg.description.unwrap_or_default());
            }
            Ok(())
        }
        Command::Scenarios { action: ScenarioAction::Show { name } } => {
            let text = scenarios::source(&name).ok_or_else(|| usage(format!("no bundled scenario named {name:?}")))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
