//! Command-line entry point: run a scenario, emit CSV metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use locnet::error::Error;
use locnet::scenario::{self, emit_csv, run_scenario, Mode, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "locnet",
    about = "Seed-deterministic multi-agent localization and tracking simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noncooperative self-localization: four mobile CAs and one anchor.
    Noncoop(RunArgs),
    /// Cooperative self-localization: three mobile CAs and one anchor.
    Coop(RunArgs),
    /// Cooperative self-localization and target tracking.
    Coslat(RunArgs),
    /// Run a scenario described by a TOML config file.
    Run(ConfigArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Cooperation mode: CC, NC, or CN.
    #[arg(long)]
    mode: Option<String>,
    /// Gradient dissemination scheme: flooding or consensus.
    #[arg(long)]
    scheme: Option<String>,
    /// Monte-Carlo runs.
    #[arg(long)]
    runs: Option<u32>,
    /// Time steps per run.
    #[arg(long)]
    steps: Option<u32>,
    /// Base seed for all random streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimation-layer sample count J.
    #[arg(long, value_name = "J")]
    j: Option<usize>,
    /// Control-layer joint sample count (selected from J).
    #[arg(long)]
    jctl: Option<usize>,
    /// Future-measurement draws per joint sample J'.
    #[arg(long)]
    jprime: Option<usize>,
    /// Average-consensus iterations R.
    #[arg(long)]
    consensus_iters: Option<usize>,
    /// Message passing iterations P.
    #[arg(long)]
    bp_iters: Option<usize>,
    /// Restore the full-size sample counts and run counts.
    #[arg(long)]
    paper_scale: bool,
    /// Output directory for the CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Execute Monte-Carlo runs serially (results are identical).
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a TOML scenario config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Execute Monte-Carlo runs serially (results are identical).
    #[arg(long)]
    serial: bool,
}

fn apply_args(mut cfg: ScenarioConfig, args: &RunArgs) -> Result<ScenarioConfig, Error> {
    if let Some(m) = &args.mode {
        cfg.mode = Mode::parse(m)?;
    }
    if let Some(s) = &args.scheme {
        cfg.scheme = scenario::parse_scheme(s)?;
    }
    if let Some(v) = args.runs {
        cfg.n_runs = v;
    }
    if let Some(v) = args.steps {
        cfg.n_steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.j {
        cfg.j_est = v;
    }
    if let Some(v) = args.jctl {
        cfg.j_ctl = v;
    }
    if let Some(v) = args.jprime {
        cfg.j_prime = v;
    }
    if let Some(v) = args.consensus_iters {
        cfg.consensus_iters = v;
    }
    if let Some(v) = args.bp_iters {
        cfg.bp_iters = v;
    }
    if args.serial {
        cfg.parallel = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cfg: &ScenarioConfig, out: &PathBuf) -> Result<(), Error> {
    let metrics = run_scenario(cfg)?;
    emit_csv(&metrics, out)?;
    let last = cfg.n_steps;
    print!(
        "{}: {} runs x {} steps, self RMSE @n={last}: {:.3}",
        cfg.name,
        cfg.n_runs,
        cfg.n_steps,
        metrics.self_rmse(last)
    );
    if let Some(t) = metrics.target_rmse(last) {
        print!(", target RMSE @n={last}: {t:.3}");
    }
    println!();
    println!(
        "wrote rmse.csv, trajectories.csv, cost.csv to {}",
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Noncoop(args) => scenario::by_name("noncoop", args.paper_scale)
            .and_then(|cfg| apply_args(cfg, args))
            .map(|cfg| (cfg, args.out.clone())),
        Command::Coop(args) => scenario::by_name("coop", args.paper_scale)
            .and_then(|cfg| apply_args(cfg, args))
            .map(|cfg| (cfg, args.out.clone())),
        Command::Coslat(args) => scenario::by_name("coslat", args.paper_scale)
            .and_then(|cfg| apply_args(cfg, args))
            .map(|cfg| (cfg, args.out.clone())),
        Command::Run(args) => scenario::load_config(&args.config).map(|mut cfg| {
            if args.serial {
                cfg.parallel = false;
            }
            (cfg, args.out.clone())
        }),
    };
    let (cfg, out) = match result {
        Ok(v) => v,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    match execute(&cfg, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(2)
        }
    }
}
