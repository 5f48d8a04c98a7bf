//! The `intg` command-line driver: build, train, eval, analyze and verify.

pub mod commands;
pub mod config;
mod manifest;
pub mod verify;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use integral_core::data::{toy_copy_tasks, write_tasks, Vocabulary};
use integral_core::tensor::TensorError;
use integral_core::Error;

use crate::commands::{cmd_analyze, cmd_eval, cmd_train, AnalyzeArgs, EvalArgs, TrainArgs};
use crate::config::DEFAULT_CORPUS;
use crate::manifest::Run;
use crate::verify::Scope;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const LOG_ENV: &str = "INTG_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "intg",
    version,
    about = "Train and inspect small decoders with alternative attention scores"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

// Parsed once per process, so the unboxed variants cost nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a corpus and optionally a toy task file.
    Build(BuildArgs),
    /// Train a model on a character or word corpus.
    Train(TrainArgs),
    /// Multiple-choice accuracy by lowest continuation perplexity.
    Eval(EvalArgs),
    /// Attention-map metrics exported as CSV, SVG and JSON.
    Analyze(AnalyzeArgs),
    /// Run a self-check battery; exits 1 if any check fails.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    #[arg(long, default_value = DEFAULT_CORPUS)]
    pub corpus: PathBuf,
    /// char or word
    #[arg(long, default_value = "char")]
    pub tokenizer: String,
    /// Also write this many 4-way copy tasks.
    #[arg(long)]
    pub toy_tasks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(value_enum, default_value = "all")]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Map an error chain onto the process exit-code contract.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Data(_) | Error::Io { .. } | Error::Format(_) => EXIT_DATA,
                Error::Numerical(_) | Error::Tensor(TensorError::NonFinite { .. }) => {
                    EXIT_NUMERICAL
                }
                Error::Tensor(_) => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<TensorError>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_CONFIG
}

pub fn cmd_build(args: &BuildArgs) -> Result<PathBuf> {
    let mode = match args.tokenizer.as_str() {
        "char" => integral_core::data::TokenizerMode::Char,
        "word" => integral_core::data::TokenizerMode::Word,
        other => return Err(Error::config(format!("unknown tokenizer {other:?}")).into()),
    };
    let text = std::fs::read_to_string(&args.corpus).map_err(|e| Error::io(&args.corpus, e))?;
    let vocab = Vocabulary::build(&text, mode);
    let mut run = Run::create(&args.out, "build")?;
    run.manifest.seed = Some(args.seed);
    run.manifest.inputs.push(args.corpus.clone());
    run.manifest.config = serde_json::json!({
        "tokenizer": args.tokenizer,
        "toy_tasks": args.toy_tasks,
        "vocab_size": vocab.len(),
        "vocab_hash": vocab.hash(),
    });
    let p = run.output(run.path("vocab.json"));
    vocab.save(&p)?;
    if let Some(n) = args.toy_tasks {
        let p = run.output(run.path("toy_tasks.jsonl"));
        write_tasks(&p, &toy_copy_tasks(n, args.seed))?;
    }
    run.finish("ok")?;
    println!("{}", run.dir.display());
    Ok(run.dir)
}

/// Run a parsed command and return its exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(a).map(|o| {
            println!("{}", o.checkpoint.display());
            EXIT_OK
        }),
        Command::Eval(a) => cmd_eval(a).map(|_| EXIT_OK),
        Command::Analyze(a) => cmd_analyze(a).map(|o| {
            println!("{}", o.run_dir.display());
            EXIT_OK
        }),
        Command::Verify(a) => verify::run_scope(a.scope, a.seed).map(|checks| {
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().all(|c| c.passed) {
                EXIT_OK
            } else {
                EXIT_VERIFY
            }
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}
