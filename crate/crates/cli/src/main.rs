//! `svkit` command-line front end. Every subcommand reads its inputs from
//! files and writes new files atomically, so stages chain through the
//! filesystem.

mod commands;
mod corpus;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "svkit", version, about = "Speaker-verification backend toolkit")]
struct Cli {
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log-mel filterbank features from 16 kHz WAV files.
    Fbank(commands::FbankArgs),
    /// Generate a synthetic genre-labelled corpus directory.
    GenSynth(commands::GenSynthArgs),
    /// Sample a labelled verification trial list from a synthetic corpus.
    GenTrials(commands::GenTrialsArgs),
    /// Build a retrieval manifest from a synthetic corpus.
    GenRetrieval(commands::GenRetrievalArgs),
    /// Two-stage training (stage 1, then large-margin fine-tuning).
    Train(commands::TrainArgs),
    /// Embed every utterance of a feature archive.
    Extract(commands::ExtractArgs),
    /// Cosine scoring.
    Score(commands::ScoreArgs),
    /// Cosine scoring after subtracting per-genre means.
    Submean(commands::SubmeanArgs),
    /// Adaptive score normalization of a score file.
    Asnorm(commands::AsnormArgs),
    /// Weighted average of aligned score files.
    Fuse(commands::FuseArgs),
    /// EER and minDCF of a score file.
    EvalSv(commands::EvalSvArgs),
    /// Per-target AP and mAP of a retrieval score file.
    EvalSr(commands::EvalSrArgs),
}

/// Genre information used by Sub-Mean scoring.
#[derive(Args, Debug, Clone)]
pub struct GenreArgs {
    /// Genre table (`utt genre [genre ...]`) for the scored utterances.
    #[arg(long)]
    genres: Option<std::path::PathBuf>,
    /// Embeddings the genre means are computed from.
    #[arg(long)]
    mean_emb: Option<std::path::PathBuf>,
    /// Genre table for `--mean-emb` (defaults to `--genres`).
    #[arg(long)]
    mean_genres: Option<std::path::PathBuf>,
    /// Enrollment map; multi-segment enrollments take their segments' genres.
    #[arg(long)]
    enroll: Option<std::path::PathBuf>,
}

fn exit_code(e: &svkit::Error) -> u8 {
    if e.is_internal() {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error internal: {e}");
            return ExitCode::from(4);
        }
    }
    let ctx = commands::Context { seed: cli.seed, quiet: cli.quiet };
    let result = match cli.command {
        Command::Fbank(a) => commands::fbank(&ctx, a),
        Command::GenSynth(a) => commands::gen_synth(&ctx, a),
        Command::GenTrials(a) => commands::gen_trials(&ctx, a),
        Command::GenRetrieval(a) => commands::gen_retrieval(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Extract(a) => commands::extract(&ctx, a),
        Command::Score(a) => commands::score(&ctx, a),
        Command::Submean(a) => commands::submean(&ctx, a),
        Command::Asnorm(a) => commands::asnorm(&ctx, a),
        Command::Fuse(a) => commands::fuse(&ctx, a),
        Command::EvalSv(a) => commands::eval_sv(&ctx, a),
        Command::EvalSr(a) => commands::eval_sr(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error {}: {}", e.class(), single_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn single_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}
