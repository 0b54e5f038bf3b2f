//! Colored Gaussian noise synthesized in the frequency domain.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Zero-mean, unit-variance noise whose PSD falls off as `1/f^beta`.
/// `beta = 0` gives white noise, `beta = 2` brown noise. Each positive
/// frequency bin gets an independent complex Gaussian amplitude scaled by
/// `k^(-beta/2)`; the DC bin stays zero so the mean is exact.
pub fn colored_noise(n: usize, beta: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("colored_noise: need at least 2 samples"));
    }
    if !(0.0..=2.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "colored_noise: beta {beta} outside [0, 2]"
        )));
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 1..=half {
        let amp = (k as f64).powf(-beta / 2.0);
        let re: f64 = rng.sample(StandardNormal);
        if n % 2 == 0 && k == half {
            spec[k] = Complex64::new(re * amp, 0.0);
        } else {
            let im: f64 = rng.sample(StandardNormal);
            spec[k] = Complex64::new(re * amp, im * amp);
            spec[n - k] = spec[k].conj();
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let mut out: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scale = 1.0 / var.sqrt();
    for v in &mut out {
        *v = (*v - mean) * scale;
    }
    Ok(out)
}
