//! WAV ingestion and emission (16-bit PCM or 32-bit float, any channel count).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a 16 kHz file into one vector per channel, scaled to `[-1, 1]`.
pub fn read(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.as_ref().display(),
            spec.sample_rate
        )));
    }
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Config(format!(
                "unsupported wav encoding {fmt:?} with {bits} bits"
            )))
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, &s) in out.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    Ok(out)
}

/// Reads a single-channel file.
pub fn read_mono(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut chans = read(path.as_ref())?;
    if chans.len() != 1 {
        return Err(Error::Shape(format!(
            "{}: expected mono, found {} channels",
            path.as_ref().display(),
            chans.len()
        )));
    }
    Ok(chans.remove(0))
}

/// Writes channels of equal length. PCM output is clipped to `[-1, 1)`.
pub fn write(path: impl AsRef<Path>, channels: &[&[f64]], format: WavFormat) -> Result<()> {
    let Some(first) = channels.first() else {
        return Err(Error::Shape("no channels to write".into()));
    };
    if channels.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Shape("channels differ in length".into()));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for t in 0..first.len() {
        for ch in channels {
            match format {
                WavFormat::Pcm16 => {
                    let v = (ch[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavFormat::Float32 => writer.write_sample(ch[t] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a: Vec<f64> = (0..100).map(|i| (i as f32 * 0.01).sin() as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| -x).collect();
        write(&path, &[&a, &b], WavFormat::Float32).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn pcm16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a: Vec<f64> = (0..100).map(|i| 0.9 * (i as f64 * 0.1).sin()).collect();
        write(&path, &[&a], WavFormat::Pcm16).unwrap();
        let back = read_mono(&path).unwrap();
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }
}
