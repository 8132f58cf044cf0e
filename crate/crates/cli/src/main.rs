//! medfocus command line: concept attribution, perturbation baselines,
//! benchmark evaluation and construction, and direct solver access.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    cmd_attribute, cmd_baseline, cmd_bench_build, cmd_eval, cmd_uot_solve, AttributeArgs,
    BaselineArgs, BenchBuildArgs, EvalArgs, UotSolveArgs, USAGE,
};
use config::ConfigArgs;

#[derive(Parser)]
#[command(
    name = "medfocus",
    version,
    about = "Concept-level causal attribution for vision-language models over grayscale images"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attribute a model answer to a named concept region.
    Attribute(AttributeArgs),
    /// Run a perturbation baseline and convert its map to boxes.
    Baseline(BaselineArgs),
    /// Score predicted boxes against a JSONL benchmark.
    Eval(EvalArgs),
    /// Run the three-step causal filter over a sample file.
    BenchBuild(BenchBuildArgs),
    /// Solve one transport problem between two images and report it.
    UotSolve(UotSolveArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Attribute(args) => cmd_attribute(&cli.config, args),
        Command::Baseline(args) => cmd_baseline(&cli.config, args),
        Command::Eval(args) => cmd_eval(args),
        Command::BenchBuild(args) => cmd_bench_build(&cli.config, args),
        Command::UotSolve(args) => cmd_uot_solve(&cli.config, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.to_string().starts_with(USAGE) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
