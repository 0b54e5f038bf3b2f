//! Command-line pipeline: dataset synthesis, splitting, training,
//! prediction, scoring, and cohort/run reporting. Data goes to files or
//! standard output; diagnostics go to standard error via the caller.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::dataset::{
    load_dataset, load_labels, stratified_split, synth_to_dir, PatientRecord, SplitSpec,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::model::MtlModel;
use crate::scoring::{score_dirs, write_prediction, CostModel};
use crate::trainer::{predict_patients, read_epoch_csv, train_to_dir, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "pcg-mtl", version, about = "Heart-sound murmur and outcome pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phonocardiogram cohort.
    Synth {
        /// Number of patients.
        #[arg(long)]
        n: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Base-signal power over murmur power in dB; smaller is louder.
        #[arg(long = "murmur-snr")]
        murmur_snr: Option<f64>,
    },
    /// Split a dataset into train/validation patient id lists.
    Split {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Fraction of each stratum sent to validation.
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output split JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing checkpoints and the per-epoch log.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split JSON file from `split`.
        #[arg(long)]
        split: PathBuf,
        /// Training config JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-patient prediction files for a dataset.
    Predict {
        /// Checkpoint file from a run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to predict on.
        #[arg(long)]
        data: PathBuf,
        /// Output prediction directory.
        #[arg(long)]
        out: PathBuf,
        /// Training config JSON; defaults to config.json next to the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a prediction directory against truth headers.
    Score {
        /// Directory of truth headers.
        #[arg(long)]
        truth: PathBuf,
        /// Directory of prediction files.
        #[arg(long)]
        pred: PathBuf,
        /// Report JSON path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate outcome counts against demographic variables.
    Stats {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// JSON path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge epoch logs from several runs into one comparison CSV.
    Curves {
        /// Run directories written by `train`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// CSV path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: bad {what}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn partition_by_split(
    patients: Vec<PatientRecord>,
    split: &SplitSpec,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in patients {
        if split.train_ids.contains(&p.id) {
            train.push(p);
        } else if split.val_ids.contains(&p.id) {
            val.push(p);
        } else {
            return Err(Error::invalid(format!(
                "split does not mention patient {}",
                p.id
            )));
        }
    }
    for id in split.train_ids.iter().chain(&split.val_ids) {
        if !train.iter().chain(&val).any(|p| &p.id == id) {
            return Err(Error::invalid(format!(
                "split names patient {id} missing from the dataset"
            )));
        }
    }
    Ok((train, val))
}

fn cohort_stats(data: &Path) -> Result<String> {
    let labels = load_labels(data)?;
    if labels.is_empty() {
        return Err(Error::invalid(format!("{}: no patients found", data.display())));
    }
    type Counts = BTreeMap<String, BTreeMap<String, usize>>;
    let mut by_age: Counts = BTreeMap::new();
    let mut by_sex: Counts = BTreeMap::new();
    let mut by_pregnancy: Counts = BTreeMap::new();
    let mut by_murmur: Counts = BTreeMap::new();
    let tally = |table: &mut Counts, key: &str, outcome: &str| {
        *table
            .entry(key.to_string())
            .or_default()
            .entry(outcome.to_string())
            .or_insert(0) += 1;
    };
    for m in &labels {
        let o = m.outcome.as_str();
        tally(&mut by_age, m.age.as_str(), o);
        tally(&mut by_sex, m.sex.as_str(), o);
        tally(&mut by_pregnancy, if m.pregnant { "Pregnant" } else { "Not pregnant" }, o);
        tally(&mut by_murmur, m.murmur.as_str(), o);
    }
    let report = serde_json::json!({
        "n_patients": labels.len(),
        "outcome_by_age": by_age,
        "outcome_by_sex": by_sex,
        "outcome_by_pregnancy": by_pregnancy,
        "outcome_by_murmur": by_murmur,
    });
    serde_json::to_string_pretty(&report)
        .map_err(|e| Error::invalid(format!("stats serialization failed: {e}")))
}

fn merge_curves(runs: &[PathBuf]) -> Result<String> {
    let mut text = String::from(
        "run,epoch,loss_total,val_murmur_wacc,val_outcome_wacc,val_outcome_cost,lr\n",
    );
    for dir in runs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        if name.contains(',') {
            return Err(Error::invalid(format!(
                "run directory name {name} contains a comma"
            )));
        }
        for l in read_epoch_csv(&dir.join("epochs.csv"))? {
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                name,
                l.epoch,
                l.loss_total,
                l.val_murmur_wacc,
                l.val_outcome_wacc,
                l.val_outcome_cost,
                l.lr
            ));
        }
    }
    Ok(text)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, out, seed, murmur_snr } => {
            let mut cfg = SynthConfig::default();
            if let Some(snr) = murmur_snr {
                cfg.murmur_snr_db = snr;
            }
            synth_to_dir(&out, n, &cfg, seed)?;
            Ok(())
        }
        Command::Split { data, ratio, seed, out } => {
            let patients = load_dataset(&data)?;
            let split = stratified_split(&patients, ratio, seed)?;
            let text = serde_json::to_string_pretty(&split)
                .map_err(|e| Error::invalid(format!("split serialization failed: {e}")))?;
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))
        }
        Command::Train { data, split, config, out } => {
            let cfg: TrainConfig = match config {
                Some(path) => read_json(&path, "training config")?,
                None => TrainConfig::default(),
            };
            let spec: SplitSpec = read_json(&split, "split file")?;
            let patients = load_dataset(&data)?;
            let (train_p, val_p) = partition_by_split(patients, &spec)?;
            train_to_dir(&cfg, &train_p, &val_p, &out)?;
            Ok(())
        }
        Command::Predict { checkpoint, data, out, config } => {
            let config_path = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("config.json")
            });
            let cfg: TrainConfig = read_json(&config_path, "training config")?;
            cfg.validate()?;
            let mut model = MtlModel::load(&checkpoint, cfg.model.clone())?;
            let patients = load_dataset(&data)?;
            let inferences =
                predict_patients(&mut model, &patients, &cfg.preprocess, cfg.window_secs)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for inf in &inferences {
                write_prediction(&out, &inf.prediction)?;
            }
            Ok(())
        }
        Command::Score { truth, pred, out } => {
            let report = score_dirs(&truth, &pred, &CostModel::default())?;
            let mut text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
            text.push('\n');
            emit(out.as_deref(), &text)
        }
        Command::Stats { data, out } => {
            let mut text = cohort_stats(&data)?;
            text.push('\n');
            emit(out.as_deref(), &text)
        }
        Command::Curves { runs, out } => {
            let text = merge_curves(&runs)?;
            emit(out.as_deref(), &text)
        }
    }
}
