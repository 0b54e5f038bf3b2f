//! Butterworth bandpass design and zero-phase IIR filtering.
//!
//! The design path follows the classic analog-prototype route: place the
//! Butterworth poles on the unit circle, transform lowpass -> bandpass in the
//! s-plane, then map to the z-plane with a bilinear transform whose band
//! edges are pre-warped so the digital -3 dB points land exactly on the
//! requested frequencies. Filtering uses the forward-backward scheme with
//! odd-symmetric edge extension and steady-state initial conditions, so the
//! result has zero phase lag.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Bandpass design request. `order` is the analog prototype order; the
/// resulting digital filter has `2 * order` poles.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandpassSpec {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        BandpassSpec {
            order: 3,
            low_hz: 25.0,
            high_hz: 400.0,
        }
    }
}

impl BandpassSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.order == 0 {
            return Err(Error::invalid("bandpass: order must be at least 1"));
        }
        if !(self.low_hz.is_finite() && self.high_hz.is_finite()) || self.low_hz <= 0.0 {
            return Err(Error::invalid(format!(
                "bandpass: cutoffs ({}, {}) must be finite and positive",
                self.low_hz, self.high_hz
            )));
        }
        if self.low_hz >= self.high_hz {
            return Err(Error::invalid(format!(
                "bandpass: low cutoff {} must sit below high cutoff {}",
                self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= fs / 2.0 {
            return Err(Error::invalid(format!(
                "bandpass: high cutoff {} must sit below Nyquist {}",
                self.high_hz,
                fs / 2.0
            )));
        }
        Ok(())
    }
}

/// Digital IIR filter as transfer-function coefficients, `a[0] == 1`.
#[derive(Clone, Debug)]
pub struct IirFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

/// Designs a Butterworth bandpass filter for the given sample rate.
pub fn design_butterworth_bandpass(spec: &BandpassSpec, fs: f64) -> Result<IirFilter> {
    spec.validate(fs)?;
    let n = spec.order;

    // Analog prototype: poles evenly spaced on the left unit semicircle.
    let mut poles: Vec<Complex64> = Vec::with_capacity(n);
    let mut m = -(n as i64) + 1;
    while m < n as i64 {
        let theta = std::f64::consts::PI * m as f64 / (2.0 * n as f64);
        poles.push(-Complex64::new(0.0, theta).exp());
        m += 2;
    }
    let mut zeros: Vec<Complex64> = Vec::new();
    let mut gain = 1.0;

    // Pre-warp the band edges (internal rate convention fs = 2, so the
    // bilinear constant below is 4).
    let warped_lo = 4.0 * (std::f64::consts::PI * spec.low_hz / fs).tan();
    let warped_hi = 4.0 * (std::f64::consts::PI * spec.high_hz / fs).tan();
    let wo = (warped_lo * warped_hi).sqrt();
    let bw = warped_hi - warped_lo;

    // Lowpass -> bandpass in the s-plane: each pole splits into two,
    // prototype zeros at infinity drop to the origin.
    let degree = n - zeros.len();
    let scaled: Vec<Complex64> = poles.iter().map(|p| p * bw / 2.0).collect();
    poles = scaled
        .iter()
        .flat_map(|&p| {
            let d = (p * p - wo * wo).sqrt();
            [p + d, p - d]
        })
        .collect();
    zeros = vec![Complex64::new(0.0, 0.0); degree];
    gain *= bw.powi(degree as i32);

    // Bilinear transform with fs2 = 4; the relative degree becomes zeros
    // at z = -1.
    let fs2 = Complex64::new(4.0, 0.0);
    let mut num = Complex64::new(1.0, 0.0);
    let mut den = Complex64::new(1.0, 0.0);
    for z in &zeros {
        num *= fs2 - z;
    }
    for p in &poles {
        den *= fs2 - p;
    }
    let rel_degree = poles.len() - zeros.len();
    let mut z_zeros: Vec<Complex64> = zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    z_zeros.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(rel_degree));
    let z_poles: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    gain *= (num / den).re;

    let mut b = real_poly(&z_zeros);
    for c in &mut b {
        *c *= gain;
    }
    let a = real_poly(&z_poles);
    Ok(IirFilter { b, a })
}

/// Expands a product of monomials (z - r_i) into real coefficients in
/// descending powers. Roots must be closed under conjugation.
fn real_poly(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

impl IirFilter {
    fn nfilt(&self) -> usize {
        self.b.len().max(self.a.len())
    }

    /// Complex frequency response at `f_hz` for sample rate `fs`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / fs;
        let zinv = Complex64::new(0.0, -w).exp();
        let eval = |c: &[f64]| {
            // Horner in z^{-1}.
            c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &v| acc * zinv + v)
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Single-pass magnitude response in dB.
    pub fn response_db(&self, f_hz: f64, fs: f64) -> f64 {
        20.0 * self.response(f_hz, fs).norm().log10()
    }

    /// True when every pole lies strictly inside the circle of the given
    /// radius, checked with the Schur-Cohn reduction (no eigensolver).
    pub fn poles_within(&self, radius: f64) -> bool {
        let n = self.a.len() - 1;
        if n == 0 {
            return true;
        }
        // Roots of sum a_k z^(n-k) inside radius r equal roots of the
        // rescaled polynomial sum a_k r^(n-k) w^(n-k) inside the unit circle.
        let mut c: Vec<f64> = (0..=n)
            .map(|k| self.a[k] * radius.powi((n - k) as i32))
            .collect();
        for d in (1..=n).rev() {
            let k = c[d] / c[0];
            if !(k.abs() < 1.0) {
                return false;
            }
            let next: Vec<f64> = (0..d).map(|i| c[i] - k * c[d - i]).collect();
            c = next;
        }
        true
    }

    /// Single direct-form-II-transposed pass with initial state `zi`.
    fn lfilter(&self, x: &[f64], zi: &[f64]) -> Vec<f64> {
        let n = self.nfilt();
        let mut b = self.b.clone();
        let mut a = self.a.clone();
        b.resize(n, 0.0);
        a.resize(n, 0.0);
        let a0 = a[0];
        for v in &mut b {
            *v /= a0;
        }
        for v in &mut a {
            *v /= a0;
        }
        let mut z = zi.to_vec();
        z.resize(n - 1, 0.0);
        let mut y = Vec::with_capacity(x.len());
        for &xv in x {
            let yv = b[0] * xv + z[0];
            for i in 0..n - 2 {
                z[i] = b[i + 1] * xv + z[i + 1] - a[i + 1] * yv;
            }
            z[n - 2] = b[n - 1] * xv - a[n - 1] * yv;
            y.push(yv);
        }
        y
    }

    /// Steady-state state vector for a unit step input; scaling it by the
    /// first sample of a segment suppresses the startup transient.
    fn lfilter_zi(&self) -> Vec<f64> {
        let n = self.nfilt();
        let mut b = self.b.clone();
        let mut a = self.a.clone();
        b.resize(n, 0.0);
        a.resize(n, 0.0);
        let a0 = a[0];
        for v in &mut b {
            *v /= a0;
        }
        for v in &mut a {
            *v /= a0;
        }
        let m = n - 1;
        // M = I - companion(a)^T, rhs = b[1:] - a[1:] * b[0].
        let mut mat = vec![vec![0.0; m]; m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            mat[i][i] += 1.0;
            mat[i][0] += a[i + 1];
            if i + 1 < m {
                mat[i][i + 1] -= 1.0;
            }
            rhs[i] = b[i + 1] - a[i + 1] * b[0];
        }
        solve_dense(mat, rhs)
    }

    /// Zero-phase forward-backward filtering with odd-symmetric edge padding
    /// of length `3 * (nfilt - 1)`. Rejects inputs no longer than the pad.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let padlen = 3 * (self.nfilt() - 1);
        if x.len() <= padlen {
            return Err(Error::invalid(format!(
                "filtfilt: signal length {} must exceed padding {padlen}",
                x.len()
            )));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * padlen);
        let first = x[0];
        let last = x[n - 1];
        for i in 0..padlen {
            ext.push(2.0 * first - x[padlen - i]);
        }
        ext.extend_from_slice(x);
        for i in 0..padlen {
            ext.push(2.0 * last - x[n - 2 - i]);
        }

        let zi = self.lfilter_zi();
        let scaled: Vec<f64> = zi.iter().map(|v| v * ext[0]).collect();
        let mut y = self.lfilter(&ext, &scaled);
        y.reverse();
        let scaled: Vec<f64> = zi.iter().map(|v| v * y[0]).collect();
        let mut y = self.lfilter(&y, &scaled);
        y.reverse();
        Ok(y[padlen..padlen + n].to_vec())
    }
}

/// Gaussian elimination with partial pivoting; panics on singular systems,
/// which cannot arise for the well-posed zi solve of a stable filter.
fn solve_dense(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        assert!(m[col][col].abs() > 1e-300, "singular zi system");
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                let v = m[col][k];
                m[row][k] -= f * v;
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x
}
