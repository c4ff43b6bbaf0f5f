use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use promptqa::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use promptqa::config::RunConfig;
use promptqa::gradcheck::{model_gradcheck, ModelCheckSettings};
use promptqa::metrics::evaluate;
use promptqa::pipeline::{predict_corpus, PipelineConfig};
use promptqa::synth::gen_synthetic;
use promptqa::trainer::{loss_log_to_jsonl, train_with};
use promptqa::{load_corpus, save_corpus, SlotRegistry};

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SEEDS: u64 = 20;

#[derive(Parser)]
#[command(name = "promptqa", version, about = "Slot filling as extractive QA with per-slot continuous prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        slots: PathBuf,
        /// Continue from this checkpoint instead of a fresh init.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.loss.jsonl`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Fill every slot of every example; writes the corpus schema.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        slots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the pipeline keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against gold; prints a table, optionally writes
    /// the JSONL report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        slots: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backprop gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Check a single seed instead of seeds 0..20.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        slots: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> promptqa::Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn run(command: Command) -> promptqa::Result<ExitCode> {
    match command {
        Command::Train {
            config,
            corpus,
            slots,
            init_checkpoint,
            out,
            loss_log,
        } => {
            let config = RunConfig::load(config)?;
            let registry = SlotRegistry::load(slots)?;
            let corpus = load_corpus(corpus, &registry)?;
            let model_config = config.model();
            let initial = init_checkpoint
                .map(|p| load_checkpoint_for(p, &model_config))
                .transpose()?;
            let output = train_with(&config.train, &model_config, &corpus, &registry, initial, |e, _| {
                eprintln!("epoch {:>4}  mean loss {:.6}", e.epoch, e.mean_loss);
                true
            })?;
            save_checkpoint(&output.params, &out)?;
            let loss_log = loss_log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".loss.jsonl");
                p.into()
            });
            write(&loss_log, loss_log_to_jsonl(&output.losses))?;
            println!("wrote {} and {}", out.display(), loss_log.display());
        }
        Command::Predict {
            checkpoint,
            corpus,
            slots,
            out,
            config,
        } => {
            let pipeline = match config {
                Some(p) => RunConfig::load(p)?.pipeline,
                None => PipelineConfig::default(),
            };
            let registry = SlotRegistry::load(slots)?;
            let corpus = load_corpus(corpus, &registry)?;
            let model = load_checkpoint(checkpoint)?;
            let preds = predict_corpus(&model, &registry, &corpus, &pipeline)?;
            save_corpus(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval { pred, gold, slots, out } => {
            let registry = SlotRegistry::load(slots)?;
            let preds = load_corpus(pred, &registry)?;
            let golds = load_corpus(gold, &registry)?;
            let report = evaluate(&preds, &golds, &registry)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write(&out, report.to_jsonl())?;
            }
        }
        Command::Gradcheck { config, seed } => {
            let config = RunConfig::load(config)?;
            let registry = SlotRegistry::default_registry();
            let settings = ModelCheckSettings::default();
            let seeds: Vec<u64> = match seed {
                Some(s) => vec![s],
                None => (0..GRADCHECK_SEEDS).collect(),
            };
            let start = Instant::now();
            let mut worst = 0.0f64;
            for s in seeds {
                let report = model_gradcheck(&config.model(), &registry, s, &settings)?;
                let (name, j) = report.worst.clone().unwrap_or_default();
                println!(
                    "seed {s:>3}  max rel error {:.3e}  ({} coords, worst {name}[{j}])",
                    report.max_rel_error, report.checked
                );
                worst = worst.max(report.max_rel_error);
            }
            println!(
                "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}, {:.1}s)",
                start.elapsed().as_secs_f64()
            );
            if !(worst <= GRADCHECK_TOLERANCE) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { seed, n, slots, out } => {
            let registry = SlotRegistry::load(slots)?;
            let corpus = gen_synthetic(seed, n, &registry)?;
            save_corpus(&out, &corpus)?;
            println!("wrote {} examples to {}", corpus.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
