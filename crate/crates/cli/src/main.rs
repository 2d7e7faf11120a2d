//! `stoplab` command-line entry point.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stoplab::RunConfig;

/// Optimal stopping values by reflected, randomized and dual routes.
#[derive(Debug, Parser)]
#[command(name = "stoplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reflected solve plus the penalized ladder.
    SolveReflected(Common),
    /// Penalized randomized solves over the ladder.
    SolveRandomized(Common),
    /// Lift the reflected solution and check the enlarged-space equation.
    Lift(Common),
    /// Dual values of `ν^ε` and constant policies against `Ȳ_0^n`.
    DualSweep(Common),
    /// Oracle, reflected, randomized and dual values side by side.
    Corollary(Common),
    /// Every invariant on every catalog instance.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Small run: 10^4 paths unless `-P` is given.
        #[arg(long)]
        smoke: bool,
    },
    /// Binomial tree value at time zero.
    Oracle(Common),
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Catalog instance name.
    #[arg(long)]
    problem: Option<String>,
    /// Horizon.
    #[arg(short = 'T', long)]
    horizon: Option<f64>,
    /// Time steps.
    #[arg(short = 'M', long)]
    steps: Option<usize>,
    /// Monte Carlo paths.
    #[arg(short = 'P', long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Polynomial degree per regression cell.
    #[arg(long)]
    degree: Option<usize>,
    /// Regression cells along the first state coordinate.
    #[arg(long)]
    cells: Option<usize>,
    /// Penalization levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<f64>>,
    /// Duality tolerances, comma separated.
    #[arg(long, value_delimiter = ',')]
    eps_list: Option<Vec<f64>>,
    /// Constant intensities, comma separated.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<f64>>,
    #[arg(long)]
    tree_steps: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, env = "STOPLAB_OUT_DIR")]
    out: Option<PathBuf>,
    /// Also write per-path solution CSVs.
    #[arg(long)]
    dump: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &self.problem {
            cfg.problem = v.clone();
        }
        if let Some(v) = self.horizon {
            cfg.grid.horizon = v;
        }
        if let Some(v) = self.steps {
            cfg.grid.steps = v;
        }
        if let Some(v) = self.paths {
            cfg.monte_carlo.paths = v;
        }
        if let Some(v) = self.seed {
            cfg.monte_carlo.seed = v;
        }
        if let Some(v) = self.degree {
            cfg.basis.degree = v;
        }
        if let Some(v) = self.cells {
            cfg.basis.cells = v;
        }
        if let Some(v) = &self.n_list {
            cfg.penalty.levels = v.clone();
        }
        if let Some(v) = &self.eps_list {
            cfg.penalty.epsilons = v.clone();
        }
        if let Some(v) = &self.policies {
            cfg.penalty.constants = v.clone();
        }
        if let Some(v) = self.tree_steps {
            cfg.oracle.tree_steps = v;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if let Some(v) = &self.out {
            cfg.output.dir = v.clone();
        }
        cfg.output.dump_solutions |= self.dump;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<bool> {
    let (common, smoke) = match &cli.command {
        Command::Suite { common, smoke } => (common, *smoke),
        Command::SolveReflected(c)
        | Command::SolveRandomized(c)
        | Command::Lift(c)
        | Command::DualSweep(c)
        | Command::Corollary(c)
        | Command::Oracle(c) => (c, false),
    };
    let mut cfg = common.resolve()?;
    if smoke && common.paths.is_none() {
        cfg.monte_carlo.paths = 10_000;
    }
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let outcome = match cli.command {
        Command::SolveReflected(_) => run::solve_reflected(&cfg)?,
        Command::SolveRandomized(_) => run::solve_randomized(&cfg)?,
        Command::Lift(_) => run::lift(&cfg)?,
        Command::DualSweep(_) => run::dual_sweep(&cfg)?,
        Command::Corollary(_) => run::corollary(&cfg)?,
        Command::Suite { .. } => run::suite(&cfg)?,
        Command::Oracle(_) => run::oracle(&cfg)?,
    };
    println!("{}", outcome.summary);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
