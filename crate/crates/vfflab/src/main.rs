use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vfflab::{commands, ExperimentConfig};

#[derive(Parser)]
#[command(name = "vfflab", version, about = "Value-factorization experiments: matrix games, gradient-flow probes, gridworld training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config; missing keys take the command's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured seed lists.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the three factorizations on Game A and Game B and print the learned tables.
    ReproduceMatrix(Common),
    /// Zero-loss witnesses, stability classification, temperature scaling and escape runs.
    Dynamics(Common),
    /// Gridworld training sweep over methods and seeds.
    TrainGridworld(Common),
    /// Matrix-game training with full per-run artifacts.
    TrainMatrix(Common),
}

fn load(c: &Common) -> vfflab::Result<ExperimentConfig> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> vfflab::Result<()> {
    match cli.command {
        Command::ReproduceMatrix(c) => {
            let s = commands::cmd_reproduce_matrix(&load(&c)?, &c.out)?;
            for a in &s.aggregates {
                println!(
                    "{:<8} {:<26} igm {}/{}  within 0.5: {}/{}  mean max error {:.3}",
                    a.game, a.method, a.igm_consistent, a.runs, a.within_half, a.runs, a.mean_max_abs_error
                );
            }
            println!("tables: {}", c.out.join("matrix/tables.txt").display());
        }
        Command::Dynamics(c) => {
            commands::cmd_dynamics(&load(&c)?, &c.out)?;
            let table = std::fs::read_to_string(c.out.join("dynamics/stability.txt")).unwrap_or_default();
            print!("{table}");
        }
        Command::TrainGridworld(c) => {
            let s = commands::cmd_train_gridworld(&load(&c)?, &c.out)?;
            for m in &s.methods {
                println!(
                    "{:<6} {:<30} success {:.3} [IQR {:.3}, {:.3}] over {} runs",
                    m.method, m.label, m.success_rate.mean, m.success_rate.q25, m.success_rate.q75, m.success_rate.n
                );
            }
        }
        Command::TrainMatrix(c) => {
            let s = commands::cmd_train_matrix(&load(&c)?, &c.out)?;
            for r in &s.runs {
                match &r.failure {
                    Some(f) => println!("{} {} seed {}: failed: {f}", r.game, r.method, r.seed),
                    None => println!("{} {} seed {}: greedy {} max error {:.3}", r.game, r.method, r.seed, r.greedy, r.max_abs_error),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
