//! Block-streaming primitives.
//!
//! Audio is processed in frames of `N` samples advancing by a hop of `R`
//! samples. Analysis frames are taken without any window (the most recent `N`
//! samples as they are) and transformed with a one-sided real DFT of
//! `K = N/2 + 1` bins. Output frames are synthesized by windowed overlap-add
//! with a periodic Hann window, which reconstructs a passthrough signal
//! exactly after a fixed latency of `N - R` samples.

mod dft;
mod ola;
pub mod wav;

pub use dft::Dft;
pub use ola::{hann_window, OlaSynth};

use num_complex::Complex64;

use crate::error::{check_len, Error, Result};

/// Sample rate used throughout the crate.
pub const SAMPLE_RATE: u32 = 16_000;

/// Complex sample type used for spectra and filter weights.
pub type C64 = Complex64;

/// Frame geometry shared by every streaming component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrameConfig {
    fft_len: usize,
    hop: usize,
}

impl FrameConfig {
    pub fn new(fft_len: usize, hop: usize) -> Result<Self> {
        if fft_len < 2 || !fft_len.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft length {fft_len} must be a power of two >= 2"
            )));
        }
        if hop == 0 || hop > fft_len || fft_len % hop != 0 {
            return Err(Error::Config(format!(
                "hop {hop} must divide fft length {fft_len}"
            )));
        }
        Ok(Self { fft_len, hop })
    }

    /// `N`, samples per analysis frame.
    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    /// `R`, new samples per frame.
    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `K = N/2 + 1`, bins of the one-sided spectrum.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Delay between an input sample and the corresponding output sample of
    /// the overlap-add pipeline.
    pub fn latency(&self) -> usize {
        self.fft_len - self.hop
    }
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            fft_len: 512,
            hop: 256,
        }
    }
}

/// Sliding buffer holding the most recent `N` input samples.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamBuffer {
    hop: usize,
    samples: Vec<f64>,
}

impl StreamBuffer {
    pub fn new(cfg: FrameConfig) -> Self {
        Self {
            hop: cfg.hop(),
            samples: vec![0.0; cfg.fft_len()],
        }
    }

    /// Shifts out the oldest `R` samples, appends `new_samples` and returns
    /// the resulting frame.
    pub fn push(&mut self, new_samples: &[f64]) -> Result<&[f64]> {
        check_len(self.hop, new_samples.len())?;
        let n = self.samples.len();
        self.samples.copy_within(self.hop.., 0);
        self.samples[n - self.hop..].copy_from_slice(new_samples);
        Ok(&self.samples)
    }

    pub fn frame(&self) -> &[f64] {
        &self.samples
    }

    pub fn reset(&mut self) {
        self.samples.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Splits a signal into hop-sized blocks, zero-padding the last one.
pub fn blocks(signal: &[f64], hop: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    signal.chunks(hop).map(move |c| {
        let mut b = c.to_vec();
        b.resize(hop, 0.0);
        b
    })
}
