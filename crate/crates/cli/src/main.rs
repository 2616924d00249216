//! `partsmith`: discover part sub-concepts, learn their tokens, compose and
//! render hybrids, score them, and serve the mixer API.
//!
//! Exit status: 0 on success, 1 on invalid input, 2 when an external
//! dependency or backend fails, 64 on command-line usage errors.

mod backend;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{
    ComposeArgs, DiscoverArgs, DumpAttnArgs, EvalArgs, ExtractArgs, GenerateArgs, ServeArgs, SweepArgs, TrainArgs,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_DEPENDENCY: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "partsmith", version, about = "Part-level concept discovery and composition")]
struct Cli {
    /// TOML file whose tables override built-in defaults; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract patch features from a directory of PNG images.
    Extract(ExtractArgs),
    /// Cluster patch features into a part sub-concept dictionary.
    Discover(DiscoverArgs),
    /// Learn the token dictionary, projector and adapters.
    Train(TrainArgs),
    /// Build a hybrid code from a base and donor parts, or a random suite.
    Compose(ComposeArgs),
    /// Render one image from a code.
    Generate(GenerateArgs),
    /// Render and score a composition suite.
    Eval(EvalArgs),
    /// Train and score the synthetic task across attention-loss weights.
    Sweep(SweepArgs),
    /// Write per-channel attention heatmaps for a code.
    DumpAttn(DumpAttnArgs),
    /// Serve the mixer HTTP API.
    Serve(ServeArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = config::FileConfig::load(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::Extract(a) => commands::extract(&file, a),
        Command::Discover(a) => commands::discover(&file, a),
        Command::Train(a) => commands::train(&file, a),
        Command::Compose(a) => commands::compose(a),
        Command::Generate(a) => commands::generate(&file, a),
        Command::Eval(a) => commands::eval(&file, a),
        Command::Sweep(a) => commands::sweep(&file, a),
        Command::DumpAttn(a) => commands::dump_attn(&file, a),
        Command::Serve(a) => commands::serve(&file, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_dependency() { EXIT_DEPENDENCY } else { EXIT_VALIDATION })
        }
    }
}
