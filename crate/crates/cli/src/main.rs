//! `epiray` command-line tool.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! validation errors. Diagnostics go to stderr.

// `!(x < y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod ablate;
mod common;
mod eval;
mod glomap;
mod mask;
mod plucker;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "epiray",
    version,
    about = "Epipolar masks, ray embeddings and camera-trajectory evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build multi-resolution epipolar attention masks for a clip.
    Mask(mask::MaskArgs),
    /// Dump per-pixel Plücker ray embeddings for a clip.
    Plucker(plucker::PluckerArgs),
    /// Score SfM reconstructions of generated clips against ground truth.
    Eval(eval::EvalArgs),
    /// Train the toy denoiser under each attention variant.
    Ablate(ablate::AblateArgs),
    /// Print the feature-extraction, matching and mapping commands.
    GlomapArgs(glomap::GlomapArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(a) => mask::run(a),
        Command::Plucker(a) => plucker::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::GlomapArgs(a) => glomap::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
