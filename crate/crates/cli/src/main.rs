//! `comet`: train masked MLPs and run the analysis experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Outcome, Verdict};

#[derive(Parser)]
#[command(name = "comet", version, about = "Input-routed sparse MLPs: training and analysis")]
struct Cli {
    /// Worker threads; defaults to one per core. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set epochs=5` or `--set data.kind=blobs`.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    overrides: Vec<String>,

    /// Output directory; defaults to `$COMET_OUT_DIR/<command>-<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics plus a checkpoint.
    Train(Common),
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Subcommand)]
enum Experiment {
    /// Mask overlap against input similarity.
    Similarity {
        #[command(flatten)]
        common: Common,
        /// Also write per-pair and per-decile tables.
        #[arg(long)]
        plot_data: bool,
    },
    /// Dead-neuron census over random routing networks.
    Utilization {
        #[command(flatten)]
        common: Common,
        /// Also write per-neuron activation frequencies.
        #[arg(long)]
        plot_data: bool,
    },
    /// Exact NTK decomposition on small models.
    NtkCheck(Common),
    /// Finite-difference gradient check across variants.
    GradCheck(Common),
    /// Capacity sweep over variants, widths, survival rates and seeds.
    Sweep(Common),
}

fn dispatch(command: Command) -> comet_core::Result<Outcome> {
    let load = |c: &Common| config::load_tree(c.config.as_deref(), &c.overrides);
    match command {
        Command::Train(c) => commands::run_train(load(&c)?, c.out.as_deref()),
        Command::Experiment(e) => match e {
            Experiment::Similarity { common: c, plot_data } => {
                commands::run_similarity(load(&c)?, c.out.as_deref(), plot_data)
            }
            Experiment::Utilization { common: c, plot_data } => {
                commands::run_utilization(load(&c)?, c.out.as_deref(), plot_data)
            }
            Experiment::NtkCheck(c) => commands::run_ntk_check(load(&c)?, c.out.as_deref()),
            Experiment::GradCheck(c) => commands::run_grad_check(load(&c)?, c.out.as_deref()),
            Experiment::Sweep(c) => commands::run_sweep(load(&c)?, c.out.as_deref()),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("output: {}", outcome.dir.display());
            match outcome.verdict {
                Verdict::Ok => ExitCode::SUCCESS,
                Verdict::Aborted => ExitCode::from(3),
                Verdict::CheckFailed => ExitCode::from(4),
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::error_code(&e))
        }
    }
}
