use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use comid::config::{Config, Overrides};
use comid::harness::{self, Command};

/// Centre-of-mass identification for a wheeled inverted pendulum.
#[derive(Parser, Debug)]
#[command(name = "comid", version)]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    n_poses: Option<usize>,
    #[arg(long, global = true)]
    n_betas: Option<usize>,
    /// Relative noise on the initial estimate.
    #[arg(long, global = true)]
    noise: Option<f64>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long = "xtol", global = true)]
    x_tol: Option<f64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Sample a pool of balanced poses.
    GenPoses,
    /// Sample an ensemble of perturbed mass models.
    GenBetas,
    /// Greedy pose selection over the pool.
    Filter,
    /// Gradient descent on the mass model over the selected poses.
    Learn,
    /// One closed-loop balance run.
    Simulate,
    /// Test-set error and balance torque at learning checkpoints.
    Eval,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenPoses => Command::GenPoses,
            Cmd::GenBetas => Command::GenBetas,
            Cmd::Filter => Command::Filter,
            Cmd::Learn => Command::Learn,
            Cmd::Simulate => Command::Simulate,
            Cmd::Eval => Command::Eval,
        }
    }
}

fn load(cli: &Cli) -> comid::Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        n_poses: cli.n_poses,
        n_betas: cli.n_betas,
        noise: cli.noise,
        eta: cli.eta,
        x_tol: cli.x_tol,
    })?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    if let Some(n) = std::env::var("COMID_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }

    let start = Instant::now();
    let command: Command = cli.command.into();
    let result = load(&cli).and_then(|cfg| harness::run(command, &cfg));
    let code = harness::exit_code(&result);
    match &result {
        Ok(report) => {
            eprintln!(
                "{} finished in {:.2} s; report in {}_report.json",
                command.name(),
                start.elapsed().as_secs_f64(),
                report.command
            );
            if code != harness::EXIT_OK {
                eprintln!("{} did not converge", command.name());
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(code as u8)
}
