//! 16-bit mono PCM WAV I/O. Integer samples map to [-1, 1) by division
//! by 32768.

use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| from_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::invalid(format!(
            "{}: expected 16-bit mono PCM, got {} ch / {} bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
    let samples = samples.map_err(|e| from_hound(path, e))?;
    let data: Vec<f64> = samples.iter().map(|&s| s as f64 / 32768.0).collect();
    Waveform::new(data, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.fs,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| from_hound(path, e))?;
    for &v in &w.samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| from_hound(path, e))?;
    }
    writer.finalize().map_err(|e| from_hound(path, e))?;
    Ok(())
}

fn from_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other}", path.display())),
    }
}
