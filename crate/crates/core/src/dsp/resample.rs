//! Rational-rate polyphase resampling with a Kaiser-windowed sinc kernel.

use crate::error::{Error, Result};

use super::Waveform;

const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Resamples to `target_fs`. Equal input and output rates return the input
/// samples unchanged, bit for bit. Output length is
/// `round(len * target_fs / fs)`.
pub fn resample(w: &Waveform, target_fs: u32) -> Result<Waveform> {
    if target_fs == 0 {
        return Err(Error::invalid("resample: target rate must be positive"));
    }
    if w.samples.is_empty() {
        return Err(Error::invalid("resample: empty input"));
    }
    if target_fs == w.fs {
        return Ok(w.clone());
    }
    let g = gcd(w.fs as u64, target_fs as u64);
    let up = (target_fs as u64 / g) as usize;
    let down = (w.fs as u64 / g) as usize;

    let out_len = (w.samples.len() as f64 * target_fs as f64 / w.fs as f64).round() as usize;
    let x = &w.samples;

    // Prototype lowpass at the upsampled rate fs*up, cutoff at half the
    // narrower of the two rates. Odd length 2H+1 with H = 32*up keeps the
    // group delay an integer number of upsampled ticks.
    let half = (TAPS_PER_PHASE / 2) * up;
    let cutoff = w.fs.min(target_fs) as f64 / 2.0;
    let nu = cutoff / (w.fs as f64 * up as f64);
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let t = k as f64 - half as f64;
            let frac = t / half as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
            2.0 * nu * sinc(2.0 * nu * t) * window
        })
        .collect();
    let scale = up as f64 / h.iter().sum::<f64>();
    for v in &mut h {
        *v *= scale;
    }

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let base = n * down;
        let q = base / up;
        let phase = base % up;
        let mut acc = 0.0;
        let mut t = 0usize;
        loop {
            let k = phase + up * t;
            if k > 2 * half {
                break;
            }
            let i = q as i64 + (TAPS_PER_PHASE / 2) as i64 - t as i64;
            if i >= 0 && (i as usize) < x.len() {
                acc += h[k] * x[i as usize];
            }
            t += 1;
        }
        out.push(acc);
    }
    Waveform::new(out, target_fs)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
