//! `medfuse`: generate synthetic cohorts, inspect tokenization, train,
//! evaluate and compare loss regimes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use medfuse_core::cohort::{generate_synthetic_cohort, load_cohort, save_cohort, CohortRecord};
use medfuse_core::tokenizer::{tokenize, TokenSequence};
use medfuse_core::train::{
    data_shape, evaluate, history_csv, run_experiment, split_cohort, train, Checkpoint, Regime, Split, TrainConfig,
};

#[derive(Parser)]
#[command(name = "medfuse", version, about = "Multimodal EHR sequence model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort described by the `synthetic.*` keys of a config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the token sequence of one record.
    Tokenize {
        #[arg(long)]
        cohort: PathBuf,
        /// Patient id of the record.
        #[arg(long)]
        record: String,
        /// Supplies split, normalization and tokenizer settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model and write its best checkpoint and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a cohort.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train every regime for several seeds and compare test AUROC.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated regime names.
        #[arg(long)]
        regimes: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to a cohort generated from the config.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn read_cohort(path: &Path) -> Result<Vec<CohortRecord>> {
    let (records, _) = load_cohort(path).with_context(|| format!("reading cohort {}", path.display()))?;
    Ok(records)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn token_table(id: &str, seq: &TokenSequence) -> String {
    let mut out = format!("patient_id = {id}\nn_global = {}\nlength = {}\n", seq.n_global, seq.len());
    out.push_str("index,kind,variable_id,raw_timestamp,time,value,abs_pos\n");
    for i in 0..seq.len() {
        let kind = if i < seq.n_global { "global" } else { "event" };
        let _ = writeln!(
            out,
            "{i},{kind},{},{},{},{},{}",
            seq.variable_ids[i], seq.raw_times[i], seq.times[i], seq.values[i], seq.abs_pos[i]
        );
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let records = generate_synthetic_cohort(&cfg.synthetic)?;
            save_cohort(&out, &records).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Tokenize { cohort, record, config } => {
            let cfg = load_config(config.as_deref())?;
            let records = read_cohort(&cohort)?;
            let shape = data_shape(&records)?;
            let fractions = [cfg.train_frac, cfg.val_frac, cfg.test_frac];
            let splits = split_cohort(&records, fractions, cfg.seed, shape.n_variables)?;
            let normalized = [Split::Train, Split::Val, Split::Test]
                .into_iter()
                .flat_map(|s| splits.get(s))
                .find(|r| r.patient_id == record);
            let Some(r) = normalized else {
                bail!("no record with patient id {record:?} in {}", cohort.display());
            };
            let seq = tokenize(&r.events, &cfg.model_config(shape).tokenizer())?;
            print!("{}", token_table(&r.patient_id, &seq));
        }
        Command::Train { config, cohort, out } => {
            let cfg = load_config(Some(&config))?;
            let records = read_cohort(&cohort)?;
            fs::create_dir_all(&out)?;
            let outcome = train(&cfg, &records)?;
            let ckpt = out.join("best.ckpt");
            outcome.best.save(&ckpt)?;
            write(&out.join("config.txt"), &outcome.best.config_text)?;
            write(&out.join("history.csv"), &history_csv(&outcome.history))?;
            if let Some(report) = &outcome.test_report {
                write(&out.join("test_report.csv"), &report.to_csv())?;
                print!("{}", report.to_csv());
            }
            log::info!("best epoch {}; checkpoint at {}", outcome.best_epoch, ckpt.display());
        }
        Command::Evaluate {
            checkpoint,
            cohort,
            split,
        } => {
            let ckpt =
                Checkpoint::load(&checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let records = read_cohort(&cohort)?;
            print!("{}", evaluate(&ckpt, &records, split)?.to_csv());
        }
        Command::Experiment {
            config,
            regimes,
            seeds,
            out,
            cohort,
        } => {
            let cfg = load_config(Some(&config))?;
            let regimes = Regime::parse_list(&regimes)?;
            let records = match cohort {
                Some(p) => read_cohort(&p)?,
                None => generate_synthetic_cohort(&cfg.synthetic)?,
            };
            fs::create_dir_all(&out)?;
            let report = run_experiment(&cfg, &regimes, seeds, &records)?;
            write(&out.join("results.csv"), &report.to_csv())?;
            write(&out.join("verdicts.csv"), &report.verdicts_csv())?;
            for s in &report.summaries {
                println!("{:<22} {:.4} +/- {:.4} ({} seeds)", s.regime, s.mean, s.std, s.n_seeds);
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
