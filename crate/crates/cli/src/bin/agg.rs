//! `fedmesh-agg`: the aggregator application.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedmesh::config::{generate_default, AggregatorConfig, Role};
use fedmesh_cli::{exit_code_for, init_logging, load_script, run_aggregator, stdin_commands};

#[derive(Parser)]
#[command(name = "fedmesh-agg", about = "fedmesh aggregator")]
struct Args {
    /// Aggregator YAML configuration file.
    #[arg(long, required_unless_present = "generate_config")]
    config: Option<PathBuf>,

    /// Run commands from this file instead of stdin.
    #[arg(long)]
    script: Option<PathBuf>,

    /// Log filter: error, warn, info, debug, trace.
    #[arg(long, default_value = "info")]
    log_level: String,

    /// Session seed distributed to parties with every training query.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write a commented default configuration to this path and exit.
    #[arg(long)]
    generate_config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    init_logging(&args.log_level);

    if let Some(path) = args.generate_config {
        return match generate_default(Role::Aggregator, &path) {
            Ok(()) => {
                println!("wrote {}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }

    let cfg = match AggregatorConfig::load(&args.config.expect("clap enforces presence")) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    let code = match &args.script {
        Some(path) => match load_script(path) {
            Ok(commands) => run_aggregator(cfg, commands, args.seed),
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        None => run_aggregator(cfg, stdin_commands(), args.seed),
    };
    ExitCode::from(code as u8)
}
