//! Synthetic desk-scale phonocardiogram generator.
//!
//! Signals mimic the gross structure of heart sounds: periodic S1/S2 bursts
//! (Gaussian-windowed tones in the 30-150 Hz range) at 60-120 bpm. Class
//! signatures: Present adds 150-350 Hz band-limited noise bursts during
//! systole, Abnormal adds a 25-80 Hz diastolic rumble, Unknown drowns the
//! whole recording in broadband noise (overall SNR below 0 dB).
//! Demographics are a deterministic function of the labels so strata stay
//! cooperative at tiny cohort sizes.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::dsp::{colored_noise, design_butterworth_bandpass, BandpassSpec, Waveform};
use crate::error::{Error, Result};
use crate::rng::stream_seed;

use super::types::*;
use super::write::write_patient;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub fs: u32,
    pub n_sites: usize,
    pub duration_secs: (f64, f64),
    pub bpm: (f64, f64),
    /// Base-signal power over murmur power, dB (smaller = louder murmur).
    pub murmur_snr_db: f64,
    /// Base-signal power over the broadband noise burying Unknown patients.
    pub unknown_snr_db: f64,
    /// Base-signal power over the diastolic rumble of Abnormal patients.
    pub rumble_snr_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fs: 4000,
            n_sites: 2,
            duration_secs: (16.0, 22.0),
            bpm: (60.0, 120.0),
            murmur_snr_db: 10.0,
            unknown_snr_db: -3.0,
            rumble_snr_db: 6.0,
        }
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn add_burst(x: &mut [f64], fs: f64, center: f64, sigma: f64, freq: f64, amp: f64, phase: f64) {
    let lo = ((center - 4.0 * sigma) * fs).floor().max(0.0) as usize;
    let hi = ((((center + 4.0 * sigma) * fs).ceil()) as usize).min(x.len());
    for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
        let t = i as f64 / fs - center;
        *v += amp
            * (-0.5 * (t / sigma) * (t / sigma)).exp()
            * (std::f64::consts::TAU * freq * t + phase).sin();
    }
}

/// Band-limited noise bursts enveloped over the given time intervals,
/// scaled so the whole-record power equals `target_power`.
fn banded_bursts(
    rng: &mut StdRng,
    n: usize,
    fs: f64,
    band: (f64, f64),
    intervals: &[(f64, f64)],
    target_power: f64,
) -> Result<Vec<f64>> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let spec = BandpassSpec {
        order: 3,
        low_hz: band.0,
        high_hz: band.1,
    };
    let filt = design_butterworth_bandpass(&spec, fs)?;
    let mut y = filt.filtfilt(&white)?;
    let mut env = vec![0.0; n];
    for &(a, b) in intervals {
        let c = (a + b) / 2.0;
        let s = (b - a) / 4.0;
        let lo = (a * fs).floor().max(0.0) as usize;
        let hi = ((b * fs).ceil() as usize).min(n);
        for (i, e) in env.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / fs - c;
            *e = (-0.5 * (t / s) * (t / s)).exp();
        }
    }
    for (v, e) in y.iter_mut().zip(&env) {
        *v *= e;
    }
    let p = power(&y);
    if p > 0.0 {
        let scale = (target_power / p).sqrt();
        for v in &mut y {
            *v *= scale;
        }
    }
    Ok(y)
}

fn synth_recording(
    cfg: &SynthConfig,
    murmur: MurmurLabel,
    outcome: OutcomeLabel,
    rng: &mut StdRng,
) -> Result<(Waveform, Vec<SegmentInterval>)> {
    let fs = cfg.fs as f64;
    let dur = rng.gen_range(cfg.duration_secs.0..=cfg.duration_secs.1);
    let n = (dur * fs).round() as usize;
    let bpm = rng.gen_range(cfg.bpm.0..=cfg.bpm.1);
    let period = 60.0 / bpm;
    let f_s1 = rng.gen_range(40.0..=80.0);
    let f_s2 = rng.gen_range(80.0..=150.0);

    let mut base = vec![0.0; n];
    let mut segments = Vec::new();
    let mut systoles = Vec::new();
    let mut diastoles = Vec::new();
    let mut beat = 0usize;
    loop {
        let t0 = beat as f64 * period;
        if t0 >= dur {
            break;
        }
        // Cycle layout as fractions of the beat period. The beat boundary
        // must be the same f64 expression as the next beat's start.
        let s1_end = t0 + 0.12 * period;
        let sys_end = t0 + 0.45 * period;
        let s2_end = t0 + 0.57 * period;
        let dia_end = (beat + 1) as f64 * period;
        for (a, b, state) in [
            (t0, s1_end, 1u8),
            (s1_end, sys_end, 2),
            (sys_end, s2_end, 3),
            (s2_end, dia_end, 4),
        ] {
            let b = b.min(dur);
            if b - a > 1e-3 {
                segments.push(SegmentInterval::new(a, b, state)?);
                if state == 2 {
                    systoles.push((a, b));
                } else if state == 4 {
                    diastoles.push((a, b));
                }
            }
        }
        let sigma = 0.12 * period / 5.0;
        add_burst(
            &mut base,
            fs,
            (t0 + s1_end) / 2.0,
            sigma,
            f_s1 * rng.gen_range(0.92..=1.08),
            rng.gen_range(0.8..=1.2),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        add_burst(
            &mut base,
            fs,
            (sys_end + s2_end) / 2.0,
            sigma,
            f_s2 * rng.gen_range(0.92..=1.08),
            rng.gen_range(0.6..=1.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        beat += 1;
    }

    let p_base = power(&base);
    let mut total = base;
    if murmur == MurmurLabel::Present {
        let target = p_base * 10f64.powf(-cfg.murmur_snr_db / 10.0);
        let m = banded_bursts(rng, n, fs, (150.0, 350.0), &systoles, target)?;
        for (t, v) in total.iter_mut().zip(&m) {
            *t += v;
        }
    }
    if murmur == MurmurLabel::Unknown {
        let noise = colored_noise(n, 0.0, rng)?;
        let scale = (p_base * 10f64.powf(-cfg.unknown_snr_db / 10.0)).sqrt();
        for (t, v) in total.iter_mut().zip(&noise) {
            *t += scale * v;
        }
    }
    if outcome == OutcomeLabel::Abnormal {
        let target = p_base * 10f64.powf(-cfg.rumble_snr_db / 10.0);
        let r = banded_bursts(rng, n, fs, (25.0, 80.0), &diastoles, target)?;
        for (t, v) in total.iter_mut().zip(&r) {
            *t += v;
        }
    }

    let peak = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = 0.9 / peak;
    for v in &mut total {
        *v *= scale;
    }
    Ok((Waveform::new(total, cfg.fs)?, segments))
}

fn synth_patient(i: usize, cfg: &SynthConfig, seed: u64) -> Result<PatientRecord> {
    let murmur = MurmurLabel::ALL[i % 3];
    let outcome = OutcomeLabel::ALL[i % 2];
    // Demographics follow the labels so every stratum is a full
    // murmur x outcome cell even in tiny cohorts.
    let age = match murmur {
        MurmurLabel::Present => AgeBand::Child,
        MurmurLabel::Unknown => AgeBand::Infant,
        MurmurLabel::Absent => AgeBand::Adolescent,
    };
    let sex = match outcome {
        OutcomeLabel::Abnormal => Sex::Male,
        OutcomeLabel::Normal => Sex::Female,
    };
    let mut rng = StdRng::seed_from_u64(stream_seed(seed, 1, i as u64));
    let sites = &Site::ALL[..cfg.n_sites];
    let murmur_locations = if murmur == MurmurLabel::Present {
        sites.to_vec()
    } else {
        Vec::new()
    };
    let recordings = sites
        .iter()
        .map(|&site| {
            let rec_murmur = derive_recording_murmur(murmur, &murmur_locations, site);
            let (waveform, segments) = synth_recording(cfg, rec_murmur, outcome, &mut rng)?;
            Ok(Recording {
                site,
                waveform,
                murmur: rec_murmur,
                segments,
            })
        })
        .collect::<Result<Vec<Recording>>>()?;
    let patient = PatientRecord {
        id: format!("{}", 10001 + i),
        age,
        sex,
        pregnant: false,
        murmur,
        murmur_locations,
        outcome,
        recordings,
    };
    patient.validate()?;
    Ok(patient)
}

/// Generates `n` patients. Patient `i` depends only on `(seed, i)` and the
/// config, so growing a cohort keeps its prefix.
pub fn synth_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<PatientRecord>> {
    if n < 4 {
        return Err(Error::invalid("synth: need at least 4 patients"));
    }
    if cfg.n_sites == 0 || cfg.n_sites > Site::ALL.len() {
        return Err(Error::invalid(format!(
            "synth: n_sites must be 1..={}, got {}",
            Site::ALL.len(),
            cfg.n_sites
        )));
    }
    (0..n).map(|i| synth_patient(i, cfg, seed)).collect()
}

/// Generates and writes a cohort in the on-disk patient layout.
pub fn synth_to_dir(
    dir: &std::path::Path,
    n: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let patients = synth_dataset(n, cfg, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in &patients {
        write_patient(dir, p)?;
    }
    Ok(patients)
}
