mod camrest;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{resolve, Override};
use dialogue_core::eval::ContextMode;

#[derive(Parser)]
#[command(name = "e2e-dialogue", version, about = "Train, evaluate and serve the two-decoder dialogue Transformer")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// TOML settings file with [model], [train], [paths], [eval], [serve] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization, shuffling and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory with <split>.json, db.json and ontology.json.
    #[arg(long = "data", global = true)]
    data_dir: Option<PathBuf>,
    /// Corpus file; overrides <data>/<split>.json.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    #[arg(long, global = true)]
    ontology: Option<PathBuf>,
    /// Pretrained embeddings (token then floats per line).
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Training output directory.
    #[arg(long = "out", global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    warmup: Option<u64>,
    /// Disable the copy network (p_gen fixed at 1).
    #[arg(long, global = true)]
    no_copynet: bool,
    /// Probability of dropping a whole source-token embedding in training.
    #[arg(long, global = true)]
    word_dropout: Option<f64>,
    #[arg(long, global = true, value_parser = parse_context_mode)]
    context_mode: Option<ContextMode>,
    #[arg(long, global = true)]
    port: Option<u16>,
    /// Print the resolved settings with their sources and exit.
    #[arg(long, global = true)]
    show_config: bool,
}

fn parse_context_mode(s: &str) -> Result<ContextMode, String> {
    s.parse().map_err(|e: dialogue_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl, last.ckpt and best.ckpt to --out.
    Train {
        /// Dev corpus evaluated after each epoch; defaults to <data>/dev.json if present.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Continue from a checkpoint with its stored settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a corpus split and print the evaluation report as JSON.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// Count slot placeholders per turn instead of per dialogue.
        #[arg(long)]
        per_turn: bool,
    },
    /// Interactive session on stdin/stdout.
    Chat,
    /// HTTP session service.
    Serve,
    /// Write a generated toy corpus with its database and ontology to --data.
    GenToy {
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Hold out four values from training and write train/test splits.
        #[arg(long)]
        copy_ablation: bool,
    },
    /// Convert the published CamRest676 files into split, db and ontology files in --data.
    ConvertCamrest {
        /// CamRest676.json
        #[arg(long)]
        input: PathBuf,
        /// CamRestDB.json
        #[arg(long)]
        source_db: PathBuf,
        /// CamRestOTGY.json
        #[arg(long)]
        source_ontology: PathBuf,
    },
    /// Finite-difference gradient checks for every op and the full model.
    Gradcheck,
}

fn overrides(o: &GlobalOpts) -> Vec<Override> {
    let mut v = Vec::new();
    let mut push = |key, name, value: Option<serde_json::Value>| {
        if let Some(value) = value {
            v.push(Override::flag(key, name, value));
        }
    };
    let json = |x: Option<&PathBuf>| x.map(|p| serde_json::json!(p));
    push("train.seed", "seed", o.seed.map(Into::into));
    push("paths.data_dir", "data", json(o.data_dir.as_ref()));
    push("paths.corpus", "corpus", json(o.corpus.as_ref()));
    push("paths.db", "db", json(o.db.as_ref()));
    push("paths.ontology", "ontology", json(o.ontology.as_ref()));
    push("paths.embeddings", "embeddings", json(o.embeddings.as_ref()));
    push("paths.checkpoint", "checkpoint", json(o.checkpoint.as_ref()));
    push("paths.out_dir", "out", json(o.out_dir.as_ref()));
    push("train.epochs", "epochs", o.epochs.map(Into::into));
    push("train.batch_size", "batch-size", o.batch_size.map(Into::into));
    push("train.warmup_steps", "warmup", o.warmup.map(Into::into));
    push("model.copy", "no-copynet", o.no_copynet.then_some(false.into()));
    push("model.word_dropout", "word-dropout", o.word_dropout.map(Into::into));
    push(
        "eval.context_mode",
        "context-mode",
        o.context_mode.map(|m| serde_json::to_value(m).expect("context mode serializes")),
    );
    push("serve.port", "port", o.port.map(Into::into));
    v
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let resolved = resolve(
        cli.opts.config.as_deref(),
        |k| std::env::var(k).ok(),
        overrides(&cli.opts),
    )?;
    if cli.opts.show_config {
        print!("{}", resolved.describe());
        return Ok(());
    }
    let s = resolved.settings;
    match cli.command {
        Command::Train { dev, resume } => commands::train(&s, dev, resume),
        Command::Eval { split, per_turn } => commands::eval(&s, &split, per_turn),
        Command::Chat => commands::chat(&s),
        Command::Serve => commands::serve(&s),
        Command::GenToy { n, copy_ablation } => commands::gen_toy(&s, n, copy_ablation),
        Command::ConvertCamrest {
            input,
            source_db,
            source_ontology,
        } => commands::convert_camrest(&s, &input, &source_db, &source_ontology),
        Command::Gradcheck => commands::gradcheck(&s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
