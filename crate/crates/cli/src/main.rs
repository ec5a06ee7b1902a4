//! `zemi`: synth -> index -> retrieve -> train -> eval from one config file.
//!
//! Progress goes to stderr, results to the files named in `[paths]`. On
//! failure a single JSON line `{"error": kind, "message": ...}` is printed to
//! stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zemi_core::autograd::GradCheckOptions;
use zemi_core::pipeline::parse_grid;
use zemi_core::{Error, Experiment, ExperimentConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "zemi", version, about = "Retrieval-augmented multitask prompted training on a desk budget")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted-key override, e.g. `--set fusion.strategy=noaug`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Checkpoint to evaluate (default: best.ckpt of the checkpoint dir).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus and task suite.
    Synth,
    /// Build the BM25 index over the corpus.
    Index,
    /// Retrieve top-k documents for every task instance into the cache.
    Retrieve,
    /// Multitask prompted training on the train split.
    Train,
    /// Zero-shot rank-classification evaluation on the eval split.
    Eval,
    /// Finite-difference check of the model gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check at most this many entries per parameter group.
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// One train + eval run per grid point.
    Ablate {
        /// `knob=v1,v2`, repeatable; knobs: gate, num_augs, latent, aug_len,
        /// frozen_aug_encoder, strategy.
        #[arg(long = "grid", value_name = "KNOB=V1,V2", required = true)]
        grid: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let exp = Experiment::new(cfg);
    match cli.command {
        Command::Synth => {
            let suite = exp.synth()?;
            eprintln!(
                "synth: {} documents, {} train / {} eval tasks",
                suite.corpus.len(),
                suite.train.len(),
                suite.eval.len()
            );
        }
        Command::Index => {
            let index = exp.index()?;
            eprintln!("index: {} documents, {} terms", index.n_docs(), index.vocabulary().len());
        }
        Command::Retrieve => {
            let cache = exp.retrieve()?;
            eprintln!("retrieve: {} records", cache.records.len());
        }
        Command::Train => {
            let out = exp.train()?;
            eprintln!(
                "train: {} instances, {} steps, final loss {:.5}, best epoch {}",
                out.instances,
                out.log.steps.len(),
                out.log.final_loss().unwrap_or(f64::NAN),
                out.best_epoch
            );
        }
        Command::Eval => {
            let report = exp.eval(cli.checkpoint.as_deref())?;
            eprint!("{}", report.summary());
        }
        Command::Gradcheck { h, tol, max_entries } => {
            let opts = GradCheckOptions { h, tol, max_entries_per_group: max_entries, ..Default::default() };
            let report = exp.gradcheck(&opts)?;
            eprintln!("gradcheck: {} groups, max rel. err {:.3e} (tol {tol:.0e})", report.groups.len(), report.max_rel_error());
            if !report.passed() {
                let worst = report
                    .groups
                    .iter()
                    .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                    .map(|g| g.name.clone())
                    .unwrap_or_default();
                return Err(Error::Contract(format!(
                    "gradient check failed: max rel. err {:.3e} in {worst}",
                    report.max_rel_error()
                )));
            }
        }
        Command::Ablate { grid } => {
            let table = exp.ablate(&parse_grid(&grid)?)?;
            eprint!("{}", table.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
