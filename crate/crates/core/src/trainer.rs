//! Training loop: seeded shuffling, windowing, augmentation, multi-task
//! loss, AdamW steps under a one-cycle schedule, per-epoch validation with
//! patient-level aggregation, and best-checkpoint selection.

use std::collections::HashSet;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{
    window, MurmurLabel, OutcomeLabel, PatientRecord, Recording, Site, WINDOW_SECS,
};
use crate::dsp::{augment, preprocess, AugmentConfig, PreprocessConfig, Waveform};
use crate::error::{Error, Result};
use crate::losses::{downsample_states, mtl_loss, AslParams, BatchTargets, LossKind, LossWeights};
use crate::model::{Heads, ModelConfig, MtlModel};
use crate::optim::{onecycle_lr, AdamW, EarlyStopping, OneCycleSpec};
use crate::rng::stream_seed;
use crate::scoring::{
    aggregate_murmur, aggregate_outcome, score, CostModel, PatientPrediction, ScoreReport,
};
use crate::tensor::{Graph, Mode};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epoch at which the backbone freezes; equal to max_epochs means never.
    pub freeze_epoch: usize,
    pub loss: LossKind,
    pub model: ModelConfig,
    pub seed: u64,
    pub window_secs: f64,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub weights: LossWeights,
    pub asl: AslParams,
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 60,
            freeze_epoch: 30,
            loss: LossKind::B,
            model: ModelConfig::default(),
            seed: 0,
            window_secs: WINDOW_SECS,
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            weights: LossWeights::default(),
            asl: AslParams::default(),
            max_lr: 1e-3,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            weight_decay: 0.01,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train: batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("train: max_epochs must be at least 1"));
        }
        if self.freeze_epoch > self.max_epochs {
            return Err(Error::invalid(format!(
                "train: freeze_epoch {} exceeds max_epochs {}",
                self.freeze_epoch, self.max_epochs
            )));
        }
        if !(self.window_secs > 0.0) {
            return Err(Error::invalid("train: window_secs must be positive"));
        }
        self.model.backbone.validate()?;
        self.weights.validate()?;
        self.asl.validate()?;
        let win = self.window_samples();
        let stride = self.model.backbone.total_stride();
        if win == 0 || win % stride != 0 {
            return Err(Error::invalid(format!(
                "train: window of {win} samples is not divisible by the backbone stride {stride}"
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_secs * self.preprocess.target_fs as f64).round() as usize
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_murmur: f64,
    pub loss_outcome: f64,
    pub loss_seg: f64,
    pub val_murmur_wacc: f64,
    pub val_outcome_cost: f64,
    pub val_outcome_wacc: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    /// Model state from the epoch with the best validation murmur weighted
    /// accuracy.
    pub model: MtlModel,
    pub optimizer: AdamW,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_murmur_wacc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingPrediction {
    pub site: Site,
    pub murmur: MurmurLabel,
    pub murmur_probs: [f64; 3],
    pub outcome: OutcomeLabel,
    pub outcome_probs: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientInference {
    pub prediction: PatientPrediction,
    pub recordings: Vec<RecordingPrediction>,
}

struct TrainItem {
    rec: Recording,
    murmur: usize,
    outcome: usize,
}

fn preprocess_recording(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    Ok(Recording {
        site: rec.site,
        waveform: preprocess(&rec.waveform, cfg)?,
        murmur: rec.murmur,
        segments: rec.segments.clone(),
    })
}

fn preprocess_patients(patients: &[PatientRecord], cfg: &PreprocessConfig) -> Result<Vec<PatientRecord>> {
    patients
        .iter()
        .map(|p| {
            let recordings = p
                .recordings
                .iter()
                .map(|r| preprocess_recording(r, cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientRecord {
                recordings,
                ..p.clone()
            })
        })
        .collect()
}

fn softmax_host(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Column means of a flattened (n, k) matrix.
fn mean_rows(data: &[f64], k: usize) -> Vec<f64> {
    let n = data.len() / k;
    let mut out = vec![0.0; k];
    for row in data.chunks_exact(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    out
}

/// Combines per-recording predictions into the patient-level prediction:
/// labels aggregate by the any-positive rule, probabilities by averaging
/// over recordings.
fn patient_from_recordings(id: &str, recs: &[RecordingPrediction]) -> Result<PatientPrediction> {
    let murmur_labels: Vec<MurmurLabel> = recs.iter().map(|r| r.murmur).collect();
    let outcome_labels: Vec<OutcomeLabel> = recs.iter().map(|r| r.outcome).collect();
    let murmur = aggregate_murmur(&murmur_labels)?;
    let outcome = aggregate_outcome(&outcome_labels)?;
    let mut murmur_probs = [0.0; 3];
    let mut outcome_probs = [0.0; 2];
    for r in recs {
        for (acc, p) in murmur_probs.iter_mut().zip(&r.murmur_probs) {
            *acc += p / recs.len() as f64;
        }
        for (acc, p) in outcome_probs.iter_mut().zip(&r.outcome_probs) {
            *acc += p / recs.len() as f64;
        }
    }
    Ok(PatientPrediction {
        id: id.to_string(),
        murmur,
        murmur_probs,
        outcome,
        outcome_probs,
    })
}

/// Inference over already-preprocessed patients: tiled windows per
/// recording, window logits averaged, argmax per task, then patient-level
/// aggregation.
fn predict_prepped(
    model: &mut MtlModel,
    patients: &[PatientRecord],
    window_secs: f64,
) -> Result<Vec<PatientInference>> {
    let mut rng = StdRng::seed_from_u64(0);
    let mut out = Vec::with_capacity(patients.len());
    for p in patients {
        let mut recs = Vec::with_capacity(p.recordings.len());
        for rec in &p.recordings {
            let wins = window(rec, window_secs, false, &mut rng);
            let l = wins[0].samples.len();
            let mut data = Vec::with_capacity(wins.len() * l);
            for w in &wins {
                data.extend_from_slice(&w.samples);
            }
            let mut g = Graph::new();
            let x = g.constant(&[wins.len(), 1, l], data)?;
            let pass = model.forward(&mut g, x, Mode::Eval)?;
            let ml = mean_rows(g.data(pass.murmur_logits), 3);
            let ol = mean_rows(g.data(pass.outcome_logits), 2);
            let mp = softmax_host(&ml);
            let op = softmax_host(&ol);
            recs.push(RecordingPrediction {
                site: rec.site,
                murmur: MurmurLabel::ALL[argmax(&ml)],
                murmur_probs: [mp[0], mp[1], mp[2]],
                outcome: OutcomeLabel::ALL[argmax(&ol)],
                outcome_probs: [op[0], op[1]],
            });
        }
        out.push(PatientInference {
            prediction: patient_from_recordings(&p.id, &recs)?,
            recordings: recs,
        });
    }
    Ok(out)
}

/// Full inference pipeline on raw patients: preprocess, then predict.
pub fn predict_patients(
    model: &mut MtlModel,
    patients: &[PatientRecord],
    pre: &PreprocessConfig,
    window_secs: f64,
) -> Result<Vec<PatientInference>> {
    let prepped = preprocess_patients(patients, pre)?;
    predict_prepped(model, &prepped, window_secs)
}

fn evaluate(
    model: &mut MtlModel,
    val: &[PatientRecord],
    window_secs: f64,
    cost: &CostModel,
) -> Result<ScoreReport> {
    let inferences = predict_prepped(model, val, window_secs)?;
    let truth: Vec<(MurmurLabel, OutcomeLabel)> =
        val.iter().map(|p| (p.murmur, p.outcome)).collect();
    let pred: Vec<(MurmurLabel, OutcomeLabel)> = inferences
        .iter()
        .map(|i| (i.prediction.murmur, i.prediction.outcome))
        .collect();
    score(&truth, &pred, cost)
}

/// Trains a model on recording-level batches, validating after every epoch.
/// Returns the state from the best validation epoch together with the full
/// log series.
pub fn train(
    cfg: &TrainConfig,
    train_patients: &[PatientRecord],
    val_patients: &[PatientRecord],
) -> Result<TrainOutput> {
    cfg.validate()?;
    let train_ids: HashSet<&str> = train_patients.iter().map(|p| p.id.as_str()).collect();
    if let Some(shared) = val_patients.iter().find(|p| train_ids.contains(p.id.as_str())) {
        return Err(Error::invalid(format!(
            "train: patient {} appears in both the training and validation sets",
            shared.id
        )));
    }

    let mut items = Vec::new();
    for p in train_patients {
        for rec in &p.recordings {
            items.push(TrainItem {
                rec: preprocess_recording(rec, &cfg.preprocess)?,
                murmur: rec.murmur.index(),
                outcome: p.outcome.index(),
            });
        }
    }
    if items.is_empty() {
        return Err(Error::invalid("train: the training set has no recordings"));
    }
    let val = preprocess_patients(val_patients, &cfg.preprocess)?;
    if val.is_empty() {
        return Err(Error::invalid("train: the validation set is empty"));
    }

    let mut model = MtlModel::build(cfg.model.clone(), cfg.seed)?;
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let sched = OneCycleSpec {
        max_lr: cfg.max_lr,
        total_steps: cfg.max_epochs * steps_per_epoch,
        pct_start: cfg.pct_start,
        div_factor: cfg.div_factor,
        final_div_factor: cfg.final_div_factor,
    };
    sched.validate()?;
    let mut opt = AdamW::new(onecycle_lr(&sched, 0), cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let cost = CostModel::default();
    let seg_on = cfg.model.heads == Heads::Mtl3;
    let stride = cfg.model.backbone.total_stride();
    let win_len = cfg.window_samples();
    let fs = cfg.preprocess.target_fs;

    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, usize, MtlModel, AdamW)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        if epoch == cfg.freeze_epoch {
            model.freeze_backbone();
        }

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng =
            StdRng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut sums = [0.0f64; 4];
        let mut n_windows = 0usize;
        let mut last_lr = opt.lr;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = StdRng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, b as u64));
            let n = chunk.len();
            let mut data = Vec::with_capacity(n * win_len);
            let mut targets = BatchTargets::default();
            for &i in chunk {
                let item = &items[i];
                let win = window(&item.rec, cfg.window_secs, true, &mut rng)
                    .pop()
                    .expect("training windowing yields one crop");
                let wave = Waveform::new(win.samples, fs)?;
                let aug = augment(&wave, &cfg.augment, &mut rng)?;
                data.extend_from_slice(&aug.samples);
                targets.murmur.push(item.murmur);
                targets.outcome.push(item.outcome);
                if seg_on {
                    targets.seg.extend(downsample_states(&win.seg_states, stride));
                }
            }

            let mut g = Graph::new();
            let x = g.constant(&[n, 1, win_len], data)?;
            let pass = model.forward(&mut g, x, Mode::Train)?;
            let terms = mtl_loss(
                &mut g,
                pass.murmur_logits,
                pass.outcome_logits,
                pass.seg_logits,
                &targets,
                &cfg.weights,
                cfg.loss,
                &cfg.asl,
            )?;
            let loss = g.data(terms.total)[0];
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "train: loss is not finite at epoch {epoch} step {b}"
                )));
            }
            g.backward(terms.total)?;
            opt.lr = onecycle_lr(&sched, step);
            last_lr = opt.lr;
            model.apply_gradients(&g, &pass, &mut opt)?;
            step += 1;

            let nf = n as f64;
            sums[0] += loss * nf;
            sums[1] += g.data(terms.murmur)[0] * nf;
            sums[2] += g.data(terms.outcome)[0] * nf;
            if let Some(s) = terms.seg {
                sums[3] += g.data(s)[0] * nf;
            }
            n_windows += n;
        }

        let report = evaluate(&mut model, &val, cfg.window_secs, &cost)?;
        let nw = n_windows as f64;
        logs.push(EpochLog {
            epoch,
            loss_total: sums[0] / nw,
            loss_murmur: sums[1] / nw,
            loss_outcome: sums[2] / nw,
            loss_seg: sums[3] / nw,
            val_murmur_wacc: report.murmur_wacc,
            val_outcome_cost: report.outcome_cost_per_patient,
            val_outcome_wacc: report.outcome_wacc,
            lr: last_lr,
        });

        if best.as_ref().is_none_or(|(b, ..)| report.murmur_wacc > *b) {
            best = Some((report.murmur_wacc, epoch, model.clone(), opt.clone()));
        }
        if stopper.update(report.murmur_wacc) {
            break;
        }
    }

    let (best_val_murmur_wacc, best_epoch, model, optimizer) =
        best.expect("at least one epoch ran");
    Ok(TrainOutput {
        model,
        optimizer,
        logs,
        best_epoch,
        best_val_murmur_wacc,
    })
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,loss_total,loss_murmur,loss_outcome,loss_seg,val_murmur_wacc,val_outcome_cost,val_outcome_wacc,lr";

pub fn write_epoch_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::from(EPOCH_CSV_HEADER);
    text.push('\n');
    for l in logs {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            l.epoch,
            l.loss_total,
            l.loss_murmur,
            l.loss_outcome,
            l.loss_seg,
            l.val_murmur_wacc,
            l.val_outcome_cost,
            l.val_outcome_wacc,
            l.lr
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h == EPOCH_CSV_HEADER => {}
        _ => return Err(perr(1, "unexpected epoch CSV header".into())),
    }
    let mut logs = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(perr(i + 1, format!("expected 9 fields, got {}", fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .map_err(|e| perr(i + 1, format!("bad number {}: {e}", fields[j])))
        };
        logs.push(EpochLog {
            epoch: fields[0]
                .parse::<usize>()
                .map_err(|e| perr(i + 1, format!("bad epoch {}: {e}", fields[0])))?,
            loss_total: num(1)?,
            loss_murmur: num(2)?,
            loss_outcome: num(3)?,
            loss_seg: num(4)?,
            val_murmur_wacc: num(5)?,
            val_outcome_cost: num(6)?,
            val_outcome_wacc: num(7)?,
            lr: num(8)?,
        });
    }
    Ok(logs)
}

/// Runs training and writes the run artifacts into `dir`: the training and
/// model configs as JSON, the best checkpoint (model plus optimizer state),
/// and the epoch log CSV.
pub fn train_to_dir(
    cfg: &TrainConfig,
    train_patients: &[PatientRecord],
    val_patients: &[PatientRecord],
    dir: &Path,
) -> Result<TrainOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::invalid(format!("config serialization failed: {e}")))?;
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, config_json).map_err(|e| Error::io(&config_path, e))?;
    let model_json = serde_json::to_string_pretty(&cfg.model)
        .map_err(|e| Error::invalid(format!("model config serialization failed: {e}")))?;
    let model_path = dir.join("model.json");
    std::fs::write(&model_path, model_json).map_err(|e| Error::io(&model_path, e))?;

    let out = train(cfg, train_patients, val_patients)?;

    let mut entries = out.model.to_entries();
    entries.extend(out.optimizer.to_entries());
    checkpoint::save(&dir.join("checkpoint.bin"), &entries)?;
    write_epoch_csv(&dir.join("epochs.csv"), &out.logs)?;
    Ok(out)
}
