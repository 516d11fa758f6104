use std::f64::consts::PI;

use super::FrameConfig;
use crate::error::{check_len, Result};

/// Periodic Hann window of length `N`, scaled so that its shifts by the hop
/// `R` sum to exactly one.
pub fn hann_window(cfg: FrameConfig) -> Vec<f64> {
    let n = cfg.fft_len();
    let raw: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    // For hop R dividing N/2 the overlap sum is the constant N / (2R).
    let gain: f64 = (0..n / cfg.hop()).map(|m| raw[m * cfg.hop()]).sum();
    let gain = if cfg.hop() == n { 1.0 } else { gain };
    raw.into_iter().map(|w| w / gain).collect()
}

/// Windowed overlap-add synthesis.
///
/// Each call windows a full output frame, adds it to the pending overlap and
/// emits the `R` samples that no later frame can touch any more.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OlaSynth {
    hop: usize,
    window: Vec<f64>,
    acc: Vec<f64>,
}

impl OlaSynth {
    pub fn new(cfg: FrameConfig) -> Self {
        Self {
            hop: cfg.hop(),
            window: hann_window(cfg),
            acc: vec![0.0; cfg.fft_len()],
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// The `N - R` samples of overlap still waiting for later frames.
    pub fn tail(&self) -> &[f64] {
        &self.acc[..self.acc.len() - self.hop]
    }

    pub fn set_tail(&mut self, tail: &[f64]) -> Result<()> {
        let keep = self.acc.len() - self.hop;
        check_len(keep, tail.len())?;
        self.acc[..keep].copy_from_slice(tail);
        Ok(())
    }

    pub fn synthesize(&mut self, frame: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(self.window.len(), frame.len())?;
        check_len(self.hop, out.len())?;
        for ((a, &x), &w) in self.acc.iter_mut().zip(frame).zip(&self.window) {
            *a += x * w;
        }
        out.copy_from_slice(&self.acc[..self.hop]);
        self.acc.copy_within(self.hop.., 0);
        let n = self.acc.len();
        self.acc[n - self.hop..].iter_mut().for_each(|a| *a = 0.0);
        Ok(())
    }

    pub fn synthesize_vec(&mut self, frame: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.hop];
        self.synthesize(frame, &mut out)?;
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.acc.iter_mut().for_each(|a| *a = 0.0);
    }
}
