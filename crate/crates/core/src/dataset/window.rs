//! Fixed-length windowing of preprocessed recordings, with per-sample
//! segmentation states carried along.

use rand::Rng;

use super::types::{Recording, SegmentInterval};

pub const WINDOW_SECS: f64 = 15.0;

/// A fixed-length training/eval window. `seg_states` is sample-aligned with
/// `samples`; zero-padded regions carry state 0 (unannotated).
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub samples: Vec<f64>,
    pub seg_states: Vec<u8>,
}

/// Rasterizes intervals onto a per-sample state track of length `n`.
/// Sample `i` covers time `[i/fs, (i+1)/fs)` and takes the state of the
/// interval containing its start.
pub fn states_per_sample(segments: &[SegmentInterval], n: usize, fs: u32) -> Vec<u8> {
    let mut states = vec![0u8; n];
    for seg in segments {
        let lo = (seg.start * fs as f64).round() as usize;
        let hi = ((seg.end * fs as f64).round() as usize).min(n);
        for s in states.iter_mut().take(hi).skip(lo) {
            *s = seg.state;
        }
    }
    states
}

fn slice_padded(samples: &[f64], states: &[u8], start: usize, len: usize) -> Window {
    let mut w = Window {
        samples: vec![0.0; len],
        seg_states: vec![0u8; len],
    };
    let avail = samples.len().saturating_sub(start).min(len);
    w.samples[..avail].copy_from_slice(&samples[start..start + avail]);
    w.seg_states[..avail].copy_from_slice(&states[start..start + avail]);
    w
}

/// Cuts a recording into fixed-length windows. Training picks one random
/// crop (zero-padded if the recording is shorter); evaluation tiles the
/// whole recording without overlap, zero-padding the final window.
pub fn window(rec: &Recording, length_s: f64, train: bool, rng: &mut impl Rng) -> Vec<Window> {
    let fs = rec.waveform.fs;
    let win = (length_s * fs as f64).round() as usize;
    let n = rec.waveform.samples.len();
    let states = states_per_sample(&rec.segments, n, fs);

    if train {
        let start = if n > win { rng.gen_range(0..=n - win) } else { 0 };
        return vec![slice_padded(&rec.waveform.samples, &states, start, win)];
    }
    let n_windows = n.div_ceil(win);
    (0..n_windows)
        .map(|k| slice_padded(&rec.waveform.samples, &states, k * win, win))
        .collect()
}
