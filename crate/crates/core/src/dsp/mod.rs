//! Signal conditioning for phonocardiograms: resampling, zero-phase
//! Butterworth bandpass, z-score normalization, and stochastic train-time
//! augmentation.

pub mod filter;
pub mod noise;
pub mod resample;
pub mod spectral;
pub mod wav;

use rand::Rng;

use crate::error::{Error, Result};

pub use filter::{design_butterworth_bandpass, BandpassSpec, IirFilter};
pub use noise::colored_noise;
pub use resample::resample;

/// Mono waveform with its sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub fs: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: u32) -> Result<Self> {
        if fs == 0 {
            return Err(Error::invalid("waveform: sampling rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform: no samples"));
        }
        if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("waveform: non-finite sample {v}")));
        }
        Ok(Waveform { samples, fs })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.fs as f64
    }
}

/// Normalizes to zero mean and unit population variance. Inputs with
/// standard deviation below 1e-8 come back as all zeros so silent
/// recordings cannot poison a batch.
pub fn zscore(w: &Waveform) -> Waveform {
    let n = w.samples.len() as f64;
    let mean = w.samples.iter().sum::<f64>() / n;
    let var = w.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let samples = if std < 1e-8 {
        vec![0.0; w.samples.len()]
    } else {
        w.samples.iter().map(|v| (v - mean) / std).collect()
    };
    Waveform {
        samples,
        fs: w.fs,
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_fs: u32,
    pub bandpass: BandpassSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_fs: 1000,
            bandpass: BandpassSpec::default(),
        }
    }
}

/// Full conditioning chain: resample, zero-phase bandpass, z-score.
pub fn preprocess(w: &Waveform, cfg: &PreprocessConfig) -> Result<Waveform> {
    let resampled = resample(w, cfg.target_fs)?;
    let filt = design_butterworth_bandpass(&cfg.bandpass, cfg.target_fs as f64)?;
    let filtered = filt.filtfilt(&resampled.samples)?;
    let filtered = Waveform::new(filtered, cfg.target_fs)?;
    Ok(zscore(&filtered))
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_noise: f64,
    pub p_flip: f64,
    pub snr_db: (f64, f64),
    pub noise_beta: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_noise: 0.5,
            p_flip: 0.5,
            snr_db: (6.0, 18.0),
            noise_beta: (0.0, 2.0),
        }
    }
}

thread_local! {
    static AUGMENT_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Count of [`augment`] invocations on the calling thread, for asserting
/// that evaluation paths never augment.
pub fn augment_call_count() -> u64 {
    AUGMENT_CALLS.with(|c| c.get())
}

/// Stochastic train-time augmentation: colored noise at a random SNR, then
/// polarity inversion, each gated by its own probability.
pub fn augment(w: &Waveform, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Waveform> {
    AUGMENT_CALLS.with(|c| c.set(c.get() + 1));
    let mut samples = w.samples.clone();
    if rng.gen::<f64>() < cfg.p_noise {
        let beta = rng.gen_range(cfg.noise_beta.0..=cfg.noise_beta.1);
        let snr_db = rng.gen_range(cfg.snr_db.0..=cfg.snr_db.1);
        let noise = colored_noise(samples.len(), beta, rng)?;
        let p_sig = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
        // Noise is unit variance, so the target SNR fixes its amplitude.
        let scale = (p_sig * 10f64.powf(-snr_db / 10.0)).sqrt();
        for (s, n) in samples.iter_mut().zip(&noise) {
            *s += scale * n;
        }
    }
    if rng.gen::<f64>() < cfg.p_flip {
        for s in &mut samples {
            *s = -*s;
        }
    }
    Waveform::new(samples, w.fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tone(freq: f64, fs: u32, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs as f64).sin())
            .collect();
        Waveform::new(samples, fs).unwrap()
    }

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn waveform_rejects_invalid() {
        assert!(Waveform::new(vec![], 1000).is_err());
        assert!(Waveform::new(vec![1.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 1000).is_err());
        assert!(Waveform::new(vec![f64::INFINITY], 1000).is_err());
    }

    #[test]
    fn zscore_closed_form() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0], 100).unwrap();
        let z = zscore(&w);
        let r = (3.0f64 / 2.0).sqrt();
        assert!((z.samples[0] + r).abs() < 1e-12);
        assert!(z.samples[1].abs() < 1e-12);
        assert!((z.samples[2] - r).abs() < 1e-12);
    }

    #[test]
    fn zscore_degenerate_goes_to_zero() {
        let w = Waveform::new(vec![4.0; 4], 100).unwrap();
        assert_eq!(zscore(&w).samples, vec![0.0; 4]);
    }

    #[test]
    fn zscore_idempotent_and_normalized() {
        let mut rng = StdRng::seed_from_u64(5);
        let samples: Vec<f64> = (0..500).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let w = Waveform::new(samples, 1000).unwrap();
        let z = zscore(&w);
        let (mean, var) = mean_var(&z.samples);
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
        let zz = zscore(&z);
        for (a, b) in z.samples.iter().zip(&zz.samples) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn preprocess_composition_postconditions() {
        let w = tone(100.0, 4000, 80000);
        let y = preprocess(&w, &PreprocessConfig::default()).unwrap();
        assert_eq!(y.fs, 1000);
        assert_eq!(y.samples.len(), 20000);
        let (mean, var) = mean_var(&y.samples);
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn preprocess_attenuates_drift_against_mains() {
        // 60 Hz in-band tone plus 10 Hz drift, equal amplitudes. After the
        // bandpass the drift should fall at least 20 dB relative to 60 Hz.
        let fs = 4000;
        let n = 16 * 4000;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs as f64;
                (2.0 * std::f64::consts::PI * 60.0 * t).sin()
                    + (2.0 * std::f64::consts::PI * 10.0 * t).sin()
            })
            .collect();
        let w = Waveform::new(samples, fs).unwrap();
        let y = preprocess(&w, &PreprocessConfig::default()).unwrap();
        let (freqs, psd) = spectral::welch_psd(&y.samples, 2048, 1000.0);
        let p60 = spectral::band_power(&freqs, &psd, 55.0, 65.0);
        let p10 = spectral::band_power(&freqs, &psd, 5.0, 15.0);
        let ratio_db = 10.0 * (p10 / p60).log10();
        // Input ratio is 0 dB, so the output ratio is the attenuation.
        assert!(ratio_db < -20.0, "drift/mains ratio {ratio_db} dB");
    }

    #[test]
    fn preprocess_near_idempotent_on_conditioned_input() {
        // Multi-tone signal well inside the flat part of the passband; a
        // second pass should leave such band-limited input nearly unchanged.
        let mut rng = StdRng::seed_from_u64(9);
        let tones: Vec<(f64, f64, f64)> = (0..8)
            .map(|_| {
                (
                    rng.gen_range(60.0..250.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let raw: Vec<f64> = (0..20000)
            .map(|i| {
                let t = i as f64 / 1000.0;
                tones
                    .iter()
                    .map(|(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum()
            })
            .collect();
        let w = Waveform::new(raw, 1000).unwrap();
        let once = preprocess(&w, &PreprocessConfig::default()).unwrap();
        let twice = preprocess(&once, &PreprocessConfig::default()).unwrap();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            diff += (a - b) * (a - b);
            norm += a * a;
        }
        let rel = (diff / norm).sqrt();
        assert!(rel < 0.05, "second pass changed norm by {rel}");
    }

    #[test]
    fn filtfilt_linearity() {
        let f = design_butterworth_bandpass(&BandpassSpec::default(), 1000.0).unwrap();
        let mut rng = StdRng::seed_from_u64(21);
        let x: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (alpha, beta) = (1.7, -0.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let fx = f.filtfilt(&x).unwrap();
        let fy = f.filtfilt(&y).unwrap();
        let fc = f.filtfilt(&combo).unwrap();
        let scale: f64 = fc.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..400 {
            let want = alpha * fx[i] + beta * fy[i];
            assert!((fc[i] - want).abs() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn filtfilt_zero_in_zero_out() {
        let f = design_butterworth_bandpass(&BandpassSpec::default(), 1000.0).unwrap();
        let y = f.filtfilt(&vec![0.0; 256]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn filtfilt_inband_tone_keeps_amplitude_and_phase() {
        let f = design_butterworth_bandpass(&BandpassSpec::default(), 1000.0).unwrap();
        let x: Vec<f64> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * 100.0 * i as f64 / 1000.0).sin())
            .collect();
        let y = f.filtfilt(&x).unwrap();
        let core = 500..3500;
        let amp = y[core.clone()].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!((amp - 1.0).abs() < 0.05, "amplitude {amp}");
        // Cross-correlation peak at lag 0 within +/-2 samples.
        let mut best = (0i64, f64::MIN);
        for lag in -5i64..=5 {
            let mut acc = 0.0;
            for i in core.clone() {
                let j = i as i64 + lag;
                acc += y[i] * x[j as usize];
            }
            if acc > best.1 {
                best = (lag, acc);
            }
        }
        assert_eq!(best.0, 0, "phase lag {} samples", best.0);
    }

    #[test]
    fn augment_identity_when_disabled() {
        let w = tone(100.0, 1000, 512);
        let cfg = AugmentConfig {
            p_noise: 0.0,
            p_flip: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = StdRng::seed_from_u64(1);
        let y = augment(&w, &cfg, &mut rng).unwrap();
        assert_eq!(y.samples, w.samples);
    }

    #[test]
    fn augment_pure_flip_negates() {
        let w = tone(100.0, 1000, 512);
        let cfg = AugmentConfig {
            p_noise: 0.0,
            p_flip: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = StdRng::seed_from_u64(1);
        let y = augment(&w, &cfg, &mut rng).unwrap();
        for (a, b) in y.samples.iter().zip(&w.samples) {
            assert_eq!(*a, -b);
        }
        // Involution: flipping again restores the input exactly.
        let mut rng2 = StdRng::seed_from_u64(2);
        let z = augment(&y, &cfg, &mut rng2).unwrap();
        assert_eq!(z.samples, w.samples);
    }

    #[test]
    fn augment_noise_hits_requested_snr() {
        let w = tone(100.0, 1000, 8192);
        let cfg = AugmentConfig {
            p_noise: 1.0,
            p_flip: 0.0,
            snr_db: (12.0, 12.0),
            noise_beta: (1.0, 1.0),
        };
        let mut rng = StdRng::seed_from_u64(33);
        let y = augment(&w, &cfg, &mut rng).unwrap();
        let p_sig = w.samples.iter().map(|v| v * v).sum::<f64>() / w.samples.len() as f64;
        let p_noise = y
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / w.samples.len() as f64;
        let snr = 10.0 * (p_sig / p_noise).log10();
        assert!((snr - 12.0).abs() < 1.0, "snr {snr} dB");
    }

    #[test]
    fn augment_deterministic_for_seed() {
        let w = tone(80.0, 1000, 1024);
        let cfg = AugmentConfig::default();
        let a = augment(&w, &cfg, &mut StdRng::seed_from_u64(99)).unwrap();
        let b = augment(&w, &cfg, &mut StdRng::seed_from_u64(99)).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
