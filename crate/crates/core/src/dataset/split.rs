//! Patient-level stratified train/validation split.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};

use super::types::{PatientRecord, SplitSpec};

/// Splits patients into train/validation, stratified on the
/// (age, sex, pregnancy, murmur, outcome) tuple. Each stratum sends
/// `round(ratio * size)` patients to validation; singleton strata stay in
/// training. Deterministic given the seed.
pub fn stratified_split(patients: &[PatientRecord], ratio: f64, seed: u64) -> Result<SplitSpec> {
    if patients.is_empty() {
        return Err(Error::invalid("split: no patients"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("split: ratio {ratio} outside [0, 1)")));
    }
    let mut seen = std::collections::HashSet::new();
    for p in patients {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::invalid(format!("split: duplicate patient id {}", p.id)));
        }
    }

    let mut strata: BTreeMap<_, Vec<&str>> = BTreeMap::new();
    for p in patients {
        strata.entry(p.stratum()).or_default().push(p.id.as_str());
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for ids in strata.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n_val = if ids.len() == 1 {
            0
        } else {
            ((ratio * ids.len() as f64).round() as usize).min(ids.len())
        };
        val_ids.extend(ids[..n_val].iter().map(|s| s.to_string()));
        train_ids.extend(ids[n_val..].iter().map(|s| s.to_string()));
    }
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    Ok(SplitSpec {
        train_ids,
        val_ids,
        seed,
    })
}
