//! Welch power-spectral-density estimation (Hann window, 50% overlap).

use num_complex::Complex64;
use rustfft::FftPlanner;

/// One-sided Welch PSD. Returns `(freqs_hz, psd)` with `nperseg / 2 + 1`
/// bins. The input must hold at least one full segment.
pub fn welch_psd(x: &[f64], nperseg: usize, fs: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(nperseg >= 2 && x.len() >= nperseg, "input shorter than one segment");
    let window: Vec<f64> = (0..nperseg)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / nperseg as f64).cos()))
        .collect();
    let win_energy: f64 = window.iter().map(|w| w * w).sum();

    let fft = FftPlanner::new().plan_fft_forward(nperseg);
    let n_bins = nperseg / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let step = nperseg / 2;
    let mut n_segs = 0usize;
    let mut start = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); nperseg];
    while start + nperseg <= x.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        n_segs += 1;
        start += step;
    }
    let scale = 1.0 / (fs * win_energy * n_segs as f64);
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let one_sided = if k == 0 || (nperseg % 2 == 0 && k == nperseg / 2) {
                1.0
            } else {
                2.0
            };
            a * scale * one_sided
        })
        .collect();
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * fs / nperseg as f64).collect();
    (freqs, psd)
}

/// Integrated PSD over `[lo_hz, hi_hz]` (inclusive bin centers).
pub fn band_power(freqs: &[f64], psd: &[f64], lo_hz: f64, hi_hz: f64) -> f64 {
    let df = if freqs.len() > 1 { freqs[1] - freqs[0] } else { 1.0 };
    freqs
        .iter()
        .zip(psd)
        .filter(|(f, _)| **f >= lo_hz && **f <= hi_hz)
        .map(|(_, p)| p * df)
        .sum()
}

/// Least-squares slope of log10(psd) against log10(freq) over a band.
pub fn loglog_slope(freqs: &[f64], psd: &[f64], lo_hz: f64, hi_hz: f64) -> f64 {
    let pts: Vec<(f64, f64)> = freqs
        .iter()
        .zip(psd)
        .filter(|(f, p)| **f >= lo_hz && **f <= hi_hz && **f > 0.0 && **p > 0.0)
        .map(|(f, p)| (f.log10(), p.log10()))
        .collect();
    assert!(pts.len() >= 2, "slope band holds fewer than two bins");
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_power_lands_in_right_bin() {
        let fs = 1000.0;
        let n = 8192;
        // Bin-centered 125 Hz tone, amplitude 1 => power 0.5.
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 125.0 * i as f64 / fs).sin())
            .collect();
        let (freqs, psd) = welch_psd(&x, 1024, fs);
        let near = band_power(&freqs, &psd, 120.0, 130.0);
        let total = band_power(&freqs, &psd, 0.0, 500.0);
        assert!((near - 0.5).abs() < 0.01, "tone band power {near}");
        assert!((total - 0.5).abs() < 0.01, "total power {total}");
        let peak_bin = psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((freqs[peak_bin] - 125.0).abs() < 1.0);
    }

    #[test]
    fn white_sequence_has_flat_slope() {
        // Deterministic pseudo-random bipolar sequence (linear congruential).
        let mut state = 1u64;
        let x: Vec<f64> = (0..1 << 15)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if state >> 63 == 0 { 1.0 } else { -1.0 }
            })
            .collect();
        let (freqs, psd) = welch_psd(&x, 2048, 1.0);
        let slope = loglog_slope(&freqs, &psd, 0.005, 0.2);
        assert!(slope.abs() < 0.15, "slope {slope}");
    }
}
