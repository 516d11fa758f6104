//! Linear frequency-domain filters driven by the optimizers.
//!
//! * [`mdf_forward`]: multi-delay frequency-domain (MDF) filter for echo
//!   cancellation, `y_k = sum_b theta[b,k] U[b,k]`, `e_k = d_k - y_k`.
//! * [`gsc_forward`]: single-block frequency-domain generalized sidelobe
//!   canceller with a fixed delay-and-sum beam and a projection blocking
//!   stage.
//!
//! All tensors are stored tap-major: entry `(t, k)` of a `[T x K]` tensor
//! lives at index `t * K + k`.

mod aec;
mod gsc;

pub use aec::{aec_pass, aec_pass_adjoint, AecScratch};
pub use gsc::{
    gsc_decompose, gsc_error, gsc_error_adjoint, gsc_forward, GscParams, SteeringVector,
};

use crate::error::{check_len, Error, Result};
use crate::signal::{FrameConfig, C64};

/// MDF filter weights, `B` blocks by `K` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MdfParams {
    blocks: usize,
    bins: usize,
    weights: Vec<C64>,
}

impl MdfParams {
    pub fn zeros(blocks: usize, bins: usize) -> Self {
        Self {
            blocks,
            bins,
            weights: vec![C64::default(); blocks * bins],
        }
    }

    pub fn from_weights(blocks: usize, bins: usize, weights: Vec<C64>) -> Result<Self> {
        check_len(blocks * bins, weights.len())?;
        if weights.iter().any(|w| !w.re.is_finite() || !w.im.is_finite()) {
            return Err(Error::Degenerate("non-finite filter weight".into()));
        }
        Ok(Self {
            blocks,
            bins,
            weights,
        })
    }

    /// Block-partitioned DFT of a time-domain impulse response: block `b`
    /// holds taps `[b R, (b+1) R)` zero-padded to `N`.
    pub fn from_impulse_response(ir: &[f64], blocks: usize, cfg: FrameConfig) -> Result<Self> {
        if ir.len() > blocks * cfg.hop() {
            return Err(Error::Shape(format!(
                "impulse response of {} taps does not fit {blocks} blocks of {}",
                ir.len(),
                cfg.hop()
            )));
        }
        let mut dft = crate::signal::Dft::new(cfg);
        let mut weights = Vec::with_capacity(blocks * cfg.bins());
        let mut frame = vec![0.0; cfg.fft_len()];
        for b in 0..blocks {
            frame.iter_mut().for_each(|x| *x = 0.0);
            let lo = (b * cfg.hop()).min(ir.len());
            let hi = ((b + 1) * cfg.hop()).min(ir.len());
            frame[..hi - lo].copy_from_slice(&ir[lo..hi]);
            weights.extend(dft.forward_vec(&frame)?);
        }
        Self::from_weights(blocks, cfg.bins(), weights)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn weights(&self) -> &[C64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [C64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<C64> {
        self.weights
    }
}

/// Delay line of far-end spectra, index 0 newest.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MdfInputBuffer {
    blocks: usize,
    bins: usize,
    spectra: Vec<C64>,
}

impl MdfInputBuffer {
    pub fn new(blocks: usize, bins: usize) -> Self {
        Self {
            blocks,
            bins,
            spectra: vec![C64::default(); blocks * bins],
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn block(&self, b: usize) -> &[C64] {
        &self.spectra[b * self.bins..(b + 1) * self.bins]
    }

    /// All blocks, newest first, tap-major.
    pub fn spectra(&self) -> &[C64] {
        &self.spectra
    }

    /// Contiguous view of `count` blocks starting `offset` frames back.
    pub fn window(&self, offset: usize, count: usize) -> &[C64] {
        &self.spectra[offset * self.bins..(offset + count) * self.bins]
    }

    pub fn push(&mut self, u_spec: &[C64]) -> Result<()> {
        check_len(self.bins, u_spec.len())?;
        let k = self.bins;
        self.spectra.copy_within(..(self.blocks - 1) * k, k);
        self.spectra[..k].copy_from_slice(u_spec);
        Ok(())
    }

    pub fn reset(&mut self) {
        self.spectra.iter_mut().for_each(|c| *c = C64::default());
    }
}

/// Shifts the delay line by one frame and inserts `u_spec` as the newest block.
pub fn push_far_end(buffer: &mut MdfInputBuffer, u_spec: &[C64]) -> Result<()> {
    buffer.push(u_spec)
}

/// Applies the MDF filter to the newest `B` blocks of `u` and returns the echo
/// estimate and the error spectrum.
pub fn mdf_forward(
    theta: &MdfParams,
    u: &MdfInputBuffer,
    d_spec: &[C64],
) -> Result<(Vec<C64>, Vec<C64>)> {
    if u.bins() != theta.bins() || u.blocks() < theta.blocks() {
        return Err(Error::Shape(format!(
            "filter is {}x{}, input buffer is {}x{}",
            theta.blocks(),
            theta.bins(),
            u.blocks(),
            u.bins()
        )));
    }
    check_len(theta.bins(), d_spec.len())?;
    let mut y = vec![C64::default(); theta.bins()];
    mdf_accumulate(
        theta.weights(),
        u.window(0, theta.blocks()),
        theta.bins(),
        &mut y,
    );
    let e = d_spec.iter().zip(&y).map(|(d, y)| d - y).collect();
    Ok((y, e))
}

/// `out[k] = sum_b theta[b,k] x[b,k]` over tap-major tensors.
pub(crate) fn mdf_accumulate(theta: &[C64], x: &[C64], bins: usize, out: &mut [C64]) {
    out.iter_mut().for_each(|o| *o = C64::default());
    for (tb, xb) in theta.chunks_exact(bins).zip(x.chunks_exact(bins)) {
        for ((o, t), u) in out.iter_mut().zip(tb).zip(xb) {
            *o += t * u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn zero_filter_passes_mixture() {
        let theta = MdfParams::zeros(2, 3);
        let mut u = MdfInputBuffer::new(2, 3);
        u.push(&[c(1.0, 2.0), c(3.0, 0.0), c(-1.0, 1.0)]).unwrap();
        let d = vec![c(0.5, 0.5), c(1.0, -1.0), c(2.0, 0.0)];
        let (y, e) = mdf_forward(&theta, &u, &d).unwrap();
        assert!(y.iter().all(|v| v.norm() == 0.0));
        assert_eq!(e, d);
    }

    #[test]
    fn unit_single_block_returns_newest_frame() {
        let theta = MdfParams::from_weights(1, 3, vec![c(1.0, 0.0); 3]).unwrap();
        let mut u = MdfInputBuffer::new(1, 3);
        let frame = [c(1.0, 2.0), c(3.0, 0.0), c(-1.0, 1.0)];
        u.push(&frame).unwrap();
        let d = vec![c(2.0, 2.0); 3];
        let (y, e) = mdf_forward(&theta, &u, &d).unwrap();
        assert_eq!(y, frame.to_vec());
        for k in 0..3 {
            assert_eq!(e[k], d[k] - frame[k]);
        }
    }

    #[test]
    fn delay_line_is_newest_first() {
        let mut u = MdfInputBuffer::new(2, 2);
        let a = [c(1.0, 0.0), c(2.0, 0.0)];
        let b = [c(3.0, 0.0), c(4.0, 0.0)];
        push_far_end(&mut u, &a).unwrap();
        push_far_end(&mut u, &b).unwrap();
        assert_eq!(u.block(0), &b);
        assert_eq!(u.block(1), &a);

        let mut u = MdfInputBuffer::new(4, 1);
        for i in 0..4 {
            u.push(&[c(i as f64, 0.0)]).unwrap();
        }
        let got: Vec<f64> = (0..4).map(|b| u.block(b)[0].re).collect();
        assert_eq!(got, vec![3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let theta = MdfParams::zeros(3, 4);
        let u = MdfInputBuffer::new(2, 4);
        assert!(mdf_forward(&theta, &u, &[C64::default(); 4]).is_err());
        let u = MdfInputBuffer::new(3, 4);
        assert!(mdf_forward(&theta, &u, &[C64::default(); 5]).is_err());
    }
}
