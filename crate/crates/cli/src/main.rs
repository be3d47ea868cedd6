//! `dare`: reward estimation, simulation, theory checks and adaptation
//! experiments driven by a JSON config and command-line overrides.
//!
//! Exit codes: 0 success, 1 a check or run failed, 2 invalid input.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dare_core::rewards::RewardMode;

mod commands;
mod config;

use config::{Check, ExperimentConfig, Kind, WorldSource};

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Assertion(String),
    Runtime(String),
}

impl CliError {
    pub fn from_core(context: &str, e: dare_core::Error) -> Self {
        if e.is_validation() {
            CliError::Invalid(format!("{context}: {e}"))
        } else {
            CliError::Runtime(format!("{context}: {e}"))
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Assertion(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Assertion(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dare",
    version,
    about = "Uncertainty-aware self-reward experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reward mode(s), comma separated: mv, dare, dare_no_bonus, dare_no_prune, dist_only.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_mode)]
    mode: Vec<RewardMode>,
    /// World preset name or path to a world JSON file.
    #[arg(long, global = true)]
    world: Option<String>,
    #[arg(long = "kappa-grid", global = true, value_delimiter = ',')]
    kappa_grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score a stored rollout population.
    Estimate {
        /// Population JSON file.
        #[arg(long)]
        population: Option<PathBuf>,
    },
    /// Sample populations from a latent world.
    Simulate {
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        populations: Option<usize>,
    },
    /// Monte Carlo checks against exact oracles.
    Theory {
        /// Checks to run (default: all).
        #[arg(long, value_delimiter = ',')]
        check: Vec<Check>,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        populations: Option<usize>,
    },
    /// One adaptation run.
    Adapt {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Final pass@1 across a grid of correlation strengths.
    Sweep {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reward-variant grid over seeds.
    Ablate {
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_mode(s: &str) -> Result<RewardMode, String> {
    RewardMode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = RewardMode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode '{s}', expected one of {}", names.join(", "))
    })
}

fn build(cli: Cli) -> Result<(Kind, ExperimentConfig), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let kind = match cli.command {
        Command::Estimate { population } => {
            if let Some(p) = population {
                cfg.population = Some(std::env::current_dir().unwrap_or_default().join(p));
            }
            Kind::Estimate
        }
        Command::Simulate {
            rollouts,
            populations,
        } => {
            cfg.simulate.rollouts = rollouts.unwrap_or(cfg.simulate.rollouts);
            cfg.simulate.populations = populations.unwrap_or(cfg.simulate.populations);
            Kind::Simulate
        }
        Command::Theory {
            check,
            rollouts,
            populations,
        } => {
            if !check.is_empty() {
                cfg.theory.checks = check;
            }
            cfg.theory.rollouts = rollouts.or(cfg.theory.rollouts);
            cfg.theory.populations = populations.or(cfg.theory.populations);
            Kind::Theory
        }
        Command::Adapt { steps } | Command::Sweep { steps } | Command::Ablate { steps } => {
            cfg.adapt.steps = steps.unwrap_or(cfg.adapt.steps);
            match cli.command {
                Command::Adapt { .. } => Kind::Adapt,
                Command::Sweep { .. } => Kind::Sweep,
                _ => Kind::Ablate,
            }
        }
    };
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(CliError::Invalid(format!(
                "invalid kind: config is for '{}' but '{}' was requested",
                k.name(),
                kind.name()
            )));
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    } else if let Some(o) = &cfg.out {
        cfg.out = Some(cfg.resolve_path(o));
    }
    if let Some(w) = cli.world {
        // Paths on the command line are relative to the working directory.
        let w = if dare_core::simulator::presets::by_name(&w).is_some() {
            w
        } else {
            std::env::current_dir()
                .unwrap_or_default()
                .join(w)
                .display()
                .to_string()
        };
        cfg.world = Some(WorldSource::Named(w));
    }
    if let Some(g) = cli.kappa_grid {
        cfg.kappa_grid = Some(g);
    }
    if let Some(r) = cli.repeats {
        cfg.repeats = Some(r);
    }
    if !cli.mode.is_empty() {
        match kind {
            Kind::Sweep | Kind::Ablate => cfg.modes = Some(cli.mode),
            _ if cli.mode.len() == 1 => cfg.reward.mode = cli.mode[0],
            _ => {
                return Err(CliError::Invalid(format!(
                    "invalid mode: '{}' takes a single mode",
                    kind.name()
                )))
            }
        }
    }
    cfg.reward
        .validate()
        .map_err(|e| CliError::from_core("reward", e))?;
    Ok((kind, cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match build(cli).and_then(|(kind, cfg)| commands::run(kind, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
