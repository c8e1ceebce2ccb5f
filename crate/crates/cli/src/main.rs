//! `resihide`: train, embed, extract, evaluate and run studies.
//!
//! Exit status is 0 on success, 1 when a command fails while running and 2
//! for usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "resihide", version, about = "Hide images in audio with multi-stage residual networks")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train a model; writes `model.ckpt`, `train_log.tsv` and `config.txt` into --out.
    Train(Args),
    /// Hide --secret in --cover; writes the container WAV to --out and its manifest beside it.
    Embed(Args),
    /// Reveal the image carried by --bundle and save it to --out.
    Extract(Args),
    /// Score a checkpoint on a bundle (with --secret and --cover) or on the configured corpus.
    Eval(Args),
    /// Train one model per stage count in `t_values` and write the tables to --out.
    Sweep(Args),
    /// Train one model per wiring variant in `variants` and write the tables to --out.
    Ablate(Args),
    /// Write per-stage residual and reconstruction images to --out.
    Dump(Args),
}

#[derive(clap::Args, Clone, Debug, Default)]
pub struct Args {
    /// Flat `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable and applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub secret: Option<PathBuf>,
    #[arg(long)]
    pub cover: Option<PathBuf>,
    /// Container WAV; its manifest is read from the same path with a `.manifest` extension.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stage numbers (1-based) to treat as lost at extraction.
    #[arg(long, value_delimiter = ',')]
    pub drop: Vec<usize>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.verb {
        Verb::Train(a) => commands::train(&a),
        Verb::Embed(a) => commands::embed(&a),
        Verb::Extract(a) => commands::extract(&a),
        Verb::Eval(a) => commands::eval(&a),
        Verb::Sweep(a) => commands::sweep(&a),
        Verb::Ablate(a) => commands::ablate(&a),
        Verb::Dump(a) => commands::dump(&a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
