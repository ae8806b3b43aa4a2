//! `grc`: dataset generation, training, evaluation, inspection, and
//! verification for the dual-branch LiDAR segmentation model.
//!
//! Exit codes: 0 success, 1 usage, 2 data/configuration error, 3 numeric
//! divergence, 4 verification failure.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "grc",
    version,
    about = "Geometry/reflectance dual-branch LiDAR segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled scans as KITTI-format .bin/.label pairs.
    Gen(commands::gen::GenArgs),
    /// Train a model on generated scans.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint, optionally under weather corruption presets.
    Eval(commands::eval::EvalArgs),
    /// Run the numeric verification suites.
    Verify(commands::verify::VerifyArgs),
    /// Emit histograms and the range-view image for a scan.
    Inspect(commands::inspect::InspectArgs),
}

/// Failure carrying the process exit code.
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn data(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<grc_core::Error> for Failure {
    fn from(e: grc_core::Error) -> Self {
        let code = match &e {
            grc_core::Error::Divergence { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::data(format!("json error: {e}"))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print and exit 0; real usage errors exit 1
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => commands::gen::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Verify(args) => commands::verify::run(args),
        Command::Inspect(args) => commands::inspect::run(args),
    };
    if let Err(f) = result {
        eprintln!("error: {}", f.msg);
        std::process::exit(f.code);
    }
}
