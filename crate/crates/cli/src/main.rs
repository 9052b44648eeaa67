mod artifacts;
mod config;
mod runner;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use teamopt::{validate_problem, TimeGrid, ValidateOptions, BUILTINS};

use config::ProblemInstance;

#[derive(Parser)]
#[command(
    name = "teamopt",
    version,
    about = "Solve decentralized optimal-control problems and export trajectories, \
             residuals, and a machine-readable report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problems described by one or more configs and write artifacts
    Run(RunArgs),
    /// Print the built-in problem instances
    List,
    /// Parse a config and sanity-check the problem it describes
    Validate {
        /// Experiment config (TOML)
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configs (TOML); each runs as an independent job
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Override the number of grid steps
    #[arg(long = "grid-k", value_name = "K")]
    grid_k: Option<usize>,
    /// Override the solver tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Override the solver seed
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent jobs when several configs are given
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides the config's [output] section)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TEAMOPT_LOG")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => run(&args),
        Command::List => list(),
        Command::Validate { config } => validate(&config),
    };
    std::process::exit(code);
}

fn run(args: &RunArgs) -> i32 {
    let n = args.configs.len();
    let multi = n > 1;
    let jobs = args.jobs.clamp(1, n.max(1));
    let codes = Mutex::new(vec![0i32; n]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let path = &args.configs[i];
                let code = match run_one(path, args, multi) {
                    Ok(code) => code,
                    Err(e) => {
                        eprintln!("{}: error: {e:#}", path.display());
                        1
                    }
                };
                codes.lock().expect("worker panicked")[i] = code;
            });
        }
    });
    let codes = codes.into_inner().expect("worker panicked");
    if codes.contains(&1) {
        1
    } else if codes.contains(&2) {
        2
    } else {
        0
    }
}

fn run_one(path: &Path, args: &RunArgs, multi: bool) -> Result<i32> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg = config::parse(&text)?;
    if let Some(k) = args.grid_k {
        if k == 0 {
            bail!("grid.k must be at least 1");
        }
        cfg.grid.k = Some(k);
    }
    if let Some(tol) = args.tol {
        if !(tol > 0.0 && tol.is_finite()) {
            bail!("solver.tol must be a positive number");
        }
        cfg.solver.tol = Some(tol);
    }
    if let Some(seed) = args.seed {
        cfg.solver.seed = Some(seed);
    }

    let mut out = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("teamopt-out"));
    if multi {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "config".to_string());
        out = out.join(stem);
    }

    let code = runner::execute(&cfg, &text, &out)?;
    let status = match code {
        0 => "converged",
        _ => "did not converge",
    };
    println!(
        "{}: {status}, artifacts in {}",
        path.display(),
        out.display()
    );
    Ok(code)
}

fn list() -> i32 {
    for b in BUILTINS {
        let cost = match b.expected_cost {
            Some(c) => format!(", J* = {c}"),
            None => String::new(),
        };
        println!("{:<16} {}{}", b.name, b.summary, cost);
    }
    0
}

fn validate(path: &Path) -> i32 {
    match try_validate(path) {
        Ok(issues) if issues.is_empty() => {
            println!("{}: ok", path.display());
            0
        }
        Ok(issues) => {
            for issue in &issues {
                println!("{}: issue: {issue}", path.display());
            }
            1
        }
        Err(e) => {
            eprintln!("{}: invalid: {e:#}", path.display());
            1
        }
    }
}

fn try_validate(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg = config::parse(&text)?;
    let instance = config::build_problem(&cfg)?;
    let steps = config::resolve_steps(&cfg, &instance)?;
    let opts = ValidateOptions::default();
    let issues = match &instance {
        ProblemInstance::Team(p) => validate_problem(p, &opts)?,
        ProblemInstance::Lq(lq) => {
            let grid = TimeGrid::new(lq.horizon(), steps)?;
            lq.validate(&grid)?;
            config::build_info_specs(&cfg, lq.num_dms(), lq.horizon())?;
            return Ok(Vec::new());
        }
        ProblemInstance::Gnf(gnf) => {
            let infos = config::build_info_specs(&cfg, gnf.num_dms(), gnf.horizon())?;
            let p = gnf.to_team_problem(infos)?;
            validate_problem(&p, &opts)?
        }
        ProblemInstance::Discrete(_) => return Ok(Vec::new()),
    };
    Ok(issues.issues.iter().map(|i| i.to_string()).collect())
}
