//! `avcap`: generate synthetic tasks, pretrain and fine-tune captioners,
//! evaluate, and inspect corpora and attention.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod analyze;
mod error;
mod eval;
mod generate;
mod plot;
mod rollout;
mod run;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avcap", version, about = "Audio-visual captioning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: spec, vocabulary and train/val/test JSONL.
    Generate(generate::GenerateArgs),
    /// Pretrain a captioner, optionally with modality-balanced weighting.
    Pretrain(train::PretrainArgs),
    /// Fine-tune a checkpoint (or a fresh model) on the caption loss alone.
    Finetune(train::FinetuneArgs),
    /// Decode a split and report BLEU-4, exact match, token accuracy and loss.
    Eval(eval::EvalArgs),
    /// Speech coverage rate and audio relevance scores of text corpora.
    Analyze(analyze::AnalyzeArgs),
    /// Attention rollout over the fusion layers for one sample.
    Rollout(rollout::RolloutArgs),
    /// SVG charts of a metrics CSV.
    Plot(plot::PlotArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Pretrain(a) => train::pretrain(a),
        Command::Finetune(a) => train::finetune(a),
        Command::Eval(a) => eval::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Rollout(a) => rollout::run(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
