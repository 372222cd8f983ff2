use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvaformer_cli::{cmd_compare, cmd_dump_attention, cmd_eval, cmd_gen_data, cmd_train, RunConfig};

/// Multi-view action recognition: data generation, training, evaluation,
/// baseline comparison, and attention inspection.
#[derive(Parser)]
#[command(name = "mvaf", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value config file (dotted keys, e.g. train.epochs=10)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both data.seed and train.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory or file, depending on the command)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value overrides applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset into --out
    GenData,
    /// Train a model on --data, writing the checkpoint to --out
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on --data, writing a metric CSV to --out
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate all baseline methods, writing a CSV to --out
    Compare {
        #[arg(long)]
        data: PathBuf,
    },
    /// Dump attention weights and heatmaps for one person at one keyframe
    DumpAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        keyframe: usize,
        #[arg(long)]
        person: usize,
        /// View whose query rows the heatmaps show
        #[arg(long, default_value_t = 0)]
        query_view: usize,
    },
}

fn resolve_config(global: &Global) -> Result<RunConfig, mvaformer_core::Error> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &global.sets {
        let (key, val) = kv.split_once('=').ok_or_else(|| {
            mvaformer_core::Error::Config(format!("--set wants key=value, got {kv:?}"))
        })?;
        cfg.set(key.trim(), val.trim())?;
    }
    if let Some(seed) = global.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), mvaformer_core::Error> {
    let cfg = resolve_config(&cli.global)?;
    let out = |what: &str| {
        cli.global
            .out
            .clone()
            .ok_or_else(|| mvaformer_core::Error::Config(format!("--out is required ({what})")))
    };
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &out("dataset directory")?),
        Command::Train { data } => cmd_train(&cfg, data, &out("checkpoint path")?),
        Command::Eval { data, checkpoint } => {
            cmd_eval(&cfg, checkpoint, data, &out("metric CSV path")?)
        }
        Command::Compare { data } => cmd_compare(&cfg, data, &out("comparison CSV path")?),
        Command::DumpAttention {
            data,
            checkpoint,
            clip,
            keyframe,
            person,
            query_view,
        } => cmd_dump_attention(
            &cfg,
            checkpoint,
            data,
            clip,
            *keyframe,
            *person,
            *query_view,
            &out("dump directory")?,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
