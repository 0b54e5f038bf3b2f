//! Patient-level label aggregation, weighted accuracy, and the outcome cost
//! metric, plus the per-patient prediction file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_labels, HeaderMeta, MurmurLabel, OutcomeLabel};
use crate::error::{Error, Result};

/// Diagonal class weights, murmur order (Present, Unknown, Absent) and
/// outcome order (Abnormal, Normal). Transcribed from the official
/// PhysioNet Challenge 2022 evaluation code.
pub const MURMUR_WEIGHTS: [f64; 3] = [5.0, 3.0, 1.0];
pub const OUTCOME_WEIGHTS: [f64; 2] = [5.0, 1.0];

/// Combines per-recording murmur labels into one patient label: any Present
/// wins, otherwise any Unknown, otherwise Absent.
pub fn aggregate_murmur(labels: &[MurmurLabel]) -> Result<MurmurLabel> {
    if labels.is_empty() {
        return Err(Error::invalid("aggregate_murmur: no recording labels"));
    }
    if labels.contains(&MurmurLabel::Present) {
        Ok(MurmurLabel::Present)
    } else if labels.contains(&MurmurLabel::Unknown) {
        Ok(MurmurLabel::Unknown)
    } else {
        Ok(MurmurLabel::Absent)
    }
}

/// Two-class counterpart: any Abnormal recording marks the patient Abnormal.
pub fn aggregate_outcome(labels: &[OutcomeLabel]) -> Result<OutcomeLabel> {
    if labels.is_empty() {
        return Err(Error::invalid("aggregate_outcome: no recording labels"));
    }
    if labels.contains(&OutcomeLabel::Abnormal) {
        Ok(OutcomeLabel::Abnormal)
    } else {
        Ok(OutcomeLabel::Normal)
    }
}

/// Square count matrix with rows indexed by truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }
}

/// Fraction of weight landing on the diagonal: sum_i w_i * cm[i][i] over
/// sum_i w_i * rowsum_i.
pub fn weighted_accuracy(cm: &ConfusionMatrix, weights: &[f64]) -> Result<f64> {
    if weights.len() != cm.counts.len() {
        return Err(Error::invalid(format!(
            "weighted_accuracy: {} weights for a {}-class matrix",
            weights.len(),
            cm.counts.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::invalid("weighted_accuracy: weights must be positive"));
    }
    let num: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * cm.counts[i][i] as f64)
        .sum();
    let den: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * cm.row_sum(i) as f64)
        .sum();
    if den == 0.0 {
        return Err(Error::invalid("weighted_accuracy: empty confusion matrix"));
    }
    Ok(num / den)
}

/// Screening cost structure: a fixed per-patient algorithm cost, an expert
/// review cost polynomial in the screened fraction, a treatment cost per
/// correctly flagged abnormal patient, and a penalty per missed one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub algorithm_per_patient: f64,
    /// Coefficients of the expert cost in powers of r = screened/total; the
    /// expert total is n * sum_k coeff[k] * r^k.
    pub expert_poly: Vec<f64>,
    pub treatment_per_true_positive: f64,
    pub error_per_missed: f64,
}

impl Default for CostModel {
    /// Constants transcribed from the official PhysioNet Challenge 2022
    /// evaluation code (cost_algorithm, cost_expert, cost_treatment,
    /// cost_error in evaluate_model.py).
    fn default() -> Self {
        CostModel {
            algorithm_per_patient: 10.0,
            expert_poly: vec![25.0, 397.0, -1718.0, 0.0, 11296.0],
            treatment_per_true_positive: 10_000.0,
            error_per_missed: 50_000.0,
        }
    }
}

impl CostModel {
    pub fn expert_cost(&self, screened: u64, total: u64) -> f64 {
        let r = screened as f64 / total as f64;
        let poly: f64 = self
            .expert_poly
            .iter()
            .enumerate()
            .map(|(k, c)| c * r.powi(k as i32))
            .sum();
        poly * total as f64
    }
}

/// Total screening cost for a 2x2 outcome confusion matrix with rows/columns
/// ordered (Abnormal, Normal). Screened patients are those predicted
/// Abnormal; missed ones are true Abnormal predicted Normal.
pub fn outcome_cost_total(cm: &ConfusionMatrix, model: &CostModel) -> Result<f64> {
    if cm.counts.len() != 2 {
        return Err(Error::invalid("outcome_cost: expected a 2x2 matrix"));
    }
    let n = cm.total();
    if n == 0 {
        return Err(Error::invalid("outcome_cost: no patients scored"));
    }
    let tp = cm.counts[0][0];
    let fn_ = cm.counts[0][1];
    let screened = cm.col_sum(0);
    Ok(model.algorithm_per_patient * n as f64
        + model.expert_cost(screened, n)
        + model.treatment_per_true_positive * tp as f64
        + model.error_per_missed * fn_ as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_patients: usize,
    pub murmur_wacc: f64,
    pub outcome_wacc: f64,
    pub outcome_cost_total: f64,
    pub outcome_cost_per_patient: f64,
    pub murmur_confusion: ConfusionMatrix,
    pub outcome_confusion: ConfusionMatrix,
}

/// Scores aligned truth/prediction label pairs at the patient level.
pub fn score(
    truth: &[(MurmurLabel, OutcomeLabel)],
    pred: &[(MurmurLabel, OutcomeLabel)],
    cost: &CostModel,
) -> Result<ScoreReport> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "score: {} truth labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut murmur_cm = ConfusionMatrix::new(3);
    let mut outcome_cm = ConfusionMatrix::new(2);
    for ((tm, to), (pm, po)) in truth.iter().zip(pred) {
        murmur_cm.record(tm.index(), pm.index());
        outcome_cm.record(to.index(), po.index());
    }
    let total = outcome_cost_total(&outcome_cm, cost)?;
    Ok(ScoreReport {
        n_patients: truth.len(),
        murmur_wacc: weighted_accuracy(&murmur_cm, &MURMUR_WEIGHTS)?,
        outcome_wacc: weighted_accuracy(&outcome_cm, &OUTCOME_WEIGHTS)?,
        outcome_cost_total: total,
        outcome_cost_per_patient: total / truth.len() as f64,
        murmur_confusion: murmur_cm,
        outcome_confusion: outcome_cm,
    })
}

/// One patient's predicted labels with per-class probabilities in canonical
/// class order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientPrediction {
    pub id: String,
    pub murmur: MurmurLabel,
    pub murmur_probs: [f64; 3],
    pub outcome: OutcomeLabel,
    pub outcome_probs: [f64; 2],
}

pub fn format_prediction(p: &PatientPrediction) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "#{}", p.id);
    let _ = writeln!(s, "Murmur: {}", p.murmur.as_str());
    let probs: Vec<String> = p.murmur_probs.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(s, "Probabilities: {}", probs.join(","));
    let _ = writeln!(s, "Outcome: {}", p.outcome.as_str());
    let probs: Vec<String> = p.outcome_probs.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(s, "Probabilities: {}", probs.join(","));
    s
}

fn perr(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_probs(path: &Path, lineno: usize, line: &str, want: usize) -> Result<Vec<f64>> {
    let rest = line
        .strip_prefix("Probabilities:")
        .ok_or_else(|| perr(path, lineno, "expected a Probabilities line"))?;
    let vals: Vec<f64> = rest
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| perr(path, lineno, format!("bad probability: {e}")))?;
    if vals.len() != want {
        return Err(perr(path, lineno, format!("expected {want} probabilities, got {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(perr(path, lineno, "probabilities must be finite"));
    }
    Ok(vals)
}

pub fn parse_prediction(text: &str, path: &Path) -> Result<PatientPrediction> {
    let lines: Vec<&str> = text.lines().collect();
    let get = |i: usize| -> Result<&str> {
        lines
            .get(i)
            .copied()
            .ok_or_else(|| perr(path, i + 1, "truncated prediction file"))
    };
    let id = get(0)?
        .strip_prefix('#')
        .ok_or_else(|| perr(path, 1, "expected #<ID> on the first line"))?
        .trim()
        .to_string();
    if id.is_empty() {
        return Err(perr(path, 1, "empty patient id"));
    }
    let murmur_str = get(1)?
        .strip_prefix("Murmur:")
        .ok_or_else(|| perr(path, 2, "expected a Murmur line"))?
        .trim();
    let murmur = MurmurLabel::from_str(murmur_str)
        .ok_or_else(|| perr(path, 2, format!("unknown murmur label {murmur_str}")))?;
    let mp = parse_probs(path, 3, get(2)?, 3)?;
    let outcome_str = get(3)?
        .strip_prefix("Outcome:")
        .ok_or_else(|| perr(path, 4, "expected an Outcome line"))?
        .trim();
    let outcome = OutcomeLabel::from_str(outcome_str)
        .ok_or_else(|| perr(path, 4, format!("unknown outcome label {outcome_str}")))?;
    let op = parse_probs(path, 5, get(4)?, 2)?;
    Ok(PatientPrediction {
        id,
        murmur,
        murmur_probs: [mp[0], mp[1], mp[2]],
        outcome,
        outcome_probs: [op[0], op[1]],
    })
}

pub fn write_prediction(dir: &Path, p: &PatientPrediction) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.txt", p.id));
    std::fs::write(&path, format_prediction(p)).map_err(|e| Error::io(&path, e))
}

/// Reads every `<id>.txt` prediction in a directory, sorted by filename.
pub fn read_predictions(dir: &Path) -> Result<Vec<PatientPrediction>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_prediction(&text, p)
        })
        .collect()
}

/// Scores a prediction directory against truth headers, pairing by patient
/// id. Every truth patient must have a prediction.
pub fn score_dirs(truth_dir: &Path, pred_dir: &Path, cost: &CostModel) -> Result<ScoreReport> {
    let labels = load_labels(truth_dir)?;
    let preds = read_predictions(pred_dir)?;
    score_labels(&labels, &preds, cost)
}

pub fn score_labels(
    labels: &[HeaderMeta],
    preds: &[PatientPrediction],
    cost: &CostModel,
) -> Result<ScoreReport> {
    let by_id: std::collections::HashMap<&str, &PatientPrediction> =
        preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut truth = Vec::with_capacity(labels.len());
    let mut pred = Vec::with_capacity(labels.len());
    for l in labels {
        let p = by_id
            .get(l.id.as_str())
            .ok_or_else(|| Error::invalid(format!("no prediction for patient {}", l.id)))?;
        truth.push((l.murmur, l.outcome));
        pred.push((p.murmur, p.outcome));
    }
    score(&truth, &pred, cost)
}
