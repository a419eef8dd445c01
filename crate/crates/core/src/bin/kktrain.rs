use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kktrain::cli::{self, RunOptions};

/// Hard- and soft-constrained training experiments.
#[derive(Parser)]
#[command(name = "kktrain", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `$KKTRAIN_OUT/<config name>` or `runs/<config name>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Sphere experiments at dimension 1e6.
        #[arg(long)]
        full_scale: bool,
    },
    /// Compare two metrics.csv traces and print paired statistics as JSON.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Only rows with at least this iteration number enter the smoothness statistic.
        #[arg(long, default_value_t = 0)]
        from_iter: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Args::parse().command {
        Command::Run { config, seed, out_dir, full_scale } => cli::run(&RunOptions { config, seed, out_dir, full_scale })
            .map(|s| serde_json::to_string_pretty(&s).expect("summary serializes")),
        Command::Compare { a, b, from_iter } => {
            cli::compare_files(&a, &b, from_iter).map(|c| serde_json::to_string_pretty(&c).expect("comparison serializes"))
        }
    };
    match result {
        Ok(json) => {
            println!("{json}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("kktrain: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
