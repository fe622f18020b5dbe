use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kws_cli::{commands, CliResult, RunConfig};
use kws_core::data::Split;

#[derive(Parser)]
#[command(name = "kws", version, about = "Multi-head attention keyword spotting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, `key=value` or `table.key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for training and corpus generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving all outputs.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from the manifest's train and valid splits.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train and evaluate one model per tied λ value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Dump attention weights and features for one utterance.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
    /// Sliding-window detection over a long recording.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
    /// Write the synthetic keyword corpus.
    GenCorpus(Common),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let o = commands::cmd_train(&c.config()?, &c.out_dir)?;
            println!("best epoch {} of {}", o.best_epoch, o.epochs.len());
        }
        Command::Eval { common, checkpoint, split } => {
            let r = commands::cmd_eval(&common.config()?, &checkpoint, split, &common.out_dir)?;
            for op in &r.operating_points {
                println!("FRR at {} FA/hr: {:.4}", op.target_fa_per_hour, op.frr);
            }
        }
        Command::Sweep { common, lambdas, workers } => {
            for r in commands::cmd_sweep(&common.config()?, &lambdas, workers, &common.out_dir)? {
                println!("lambda {}: FRR at 1 FA/hr {:?} ({})", r.lambda, r.frr_at_1fa, r.status);
            }
        }
        Command::Inspect { common, checkpoint, wav } => {
            let p = commands::cmd_inspect(&common.config()?, &checkpoint, &wav, &common.out_dir)?;
            println!("confidence {}", p.confidence());
        }
        Command::Detect { common, checkpoint, wav } => {
            for d in commands::cmd_detect(&common.config()?, &checkpoint, &wav, &common.out_dir)? {
                println!("{:.2}s {:.4}", d.time_s, d.confidence);
            }
        }
        Command::GenCorpus(c) => {
            let m = commands::cmd_gen_corpus(&c.config()?, &c.out_dir)?;
            println!("{} clips written", m.entries().len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

