use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seat_core::corpus::{generate_synthetic, write_dataset, write_embeddings};
use seat_core::harness::config::{DataSource, RunConfig};
use seat_core::harness::pipeline::{cmd_eval, cmd_train_base, cmd_train_scorer, run_pipeline};
use seat_core::harness::{Method, Suite};
use seat_core::{Result, SeatError};

#[derive(Parser, Debug)]
#[command(name = "seat", version, about = "Stable and explainable attention experiments")]
struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides config and environment).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Rp,
    At,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus as dataset.jsonl and embeddings.txt.
    GenData,
    /// Train the vanilla attention model.
    TrainBase,
    /// Train the SEAT scorer on top of the base model.
    TrainSeat,
    /// Train an attention-space baseline scorer.
    TrainBaseline {
        #[arg(long, value_enum)]
        method: Baseline,
    },
    /// Run evaluation suites over the trained checkpoints.
    Eval {
        /// stability-embedding, stability-word, seed-study, interpretability,
        /// certify, ablation or all.
        #[arg(long, required = true, num_args = 1..)]
        which: Vec<String>,
    },
    Certify,
    Ablation,
    SeedStudy,
    /// Train everything and run every suite.
    Run,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_env();
    if let Some(path) = &cli.config {
        cfg.load_into(path).map_err(|e| match e {
            SeatError::Io { path, source } => SeatError::Config(format!("cannot read config {}: {source}", path.display())),
            other => other,
        })?;
        if let Some(dir) = std::env::var_os(seat_core::harness::config::OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    for s in &cli.set {
        cfg.apply(s)?;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn eval(cfg: &RunConfig, names: &[String]) -> Result<()> {
    let suites = if names.iter().any(|n| n == "all") {
        Suite::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse()).collect::<Result<Vec<Suite>>>()?
    };
    cmd_eval(cfg, &suites)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::GenData => {
            let seed = match cfg.data {
                DataSource::Synthetic { seed } => seed,
                DataSource::Files { .. } => {
                    return Err(SeatError::Config("gen-data needs data.source = synthetic".into()))
                }
            };
            let corpus = generate_synthetic(&cfg.synthetic, seed)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| SeatError::io(&cfg.out_dir, e))?;
            write_dataset(&corpus.dataset, corpus.vocab(), &cfg.out_dir.join("dataset.jsonl"))?;
            write_embeddings(&corpus.table, &cfg.out_dir.join("embeddings.txt"))?;
        }
        Command::TrainBase => {
            cmd_train_base(&cfg)?;
        }
        Command::TrainSeat => {
            cmd_train_scorer(&cfg, Method::Seat)?;
        }
        Command::TrainBaseline { method } => {
            let m = match method {
                Baseline::Rp => Method::AttentionRp,
                Baseline::At => Method::AttentionAt,
            };
            cmd_train_scorer(&cfg, m)?;
        }
        Command::Eval { which } => eval(&cfg, which)?,
        Command::Certify => eval(&cfg, &["certify".into()])?,
        Command::Ablation => eval(&cfg, &["ablation".into()])?,
        Command::SeedStudy => eval(&cfg, &["seed-study".into()])?,
        Command::Run => {
            let out = run_pipeline(&cfg)?;
            log::info!("pipeline finished in {:.1}s", out.seconds);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
