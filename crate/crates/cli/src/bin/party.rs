//! `fedmesh-party`: the data-party application.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedmesh::config::{generate_default, PartyConfig, Role};
use fedmesh_cli::{exit_code_for, init_logging, load_script, run_party, stdin_commands};

#[derive(Parser)]
#[command(name = "fedmesh-party", about = "fedmesh data party")]
struct Args {
    /// Party YAML configuration file.
    #[arg(long, required_unless_present = "generate_config")]
    config: Option<PathBuf>,

    /// Run commands from this file instead of stdin.
    #[arg(long)]
    script: Option<PathBuf>,

    /// Log filter: error, warn, info, debug, trace.
    #[arg(long, default_value = "info")]
    log_level: String,

    /// Overrides the data split seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,

    /// Write a commented default configuration to this path and exit.
    #[arg(long)]
    generate_config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    init_logging(&args.log_level);

    if let Some(path) = args.generate_config {
        return match generate_default(Role::Party, &path) {
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

    let mut cfg = match PartyConfig::load(&args.config.expect("clap enforces presence")) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }

    let code = match &args.script {
        Some(path) => match load_script(path) {
            Ok(commands) => run_party(cfg, commands),
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        None => run_party(cfg, stdin_commands()),
    };
    ExitCode::from(code as u8)
}
