//! Full-frame MDF echo path used by the echo canceller.
//!
//! With sliding (unwindowed) analysis frames only the last `R` output samples
//! of a circular MDF product are free of wrap-around. Overlap-add synthesis
//! needs all `N` samples of the frame, so every hop-sized sub-block of the
//! frame is computed with the current weights against the delay line shifted
//! to that sub-block. Sub-block `i` of `m = N/R` uses history offset
//! `m - 1 - i`, so the delay line must hold `B + m - 1` spectra.
//!
//! With a filter whose blocks carry at most `R` taps this reproduces the
//! linear convolution of the far-end signal over the whole frame exactly.

use crate::error::{check_len, Error, Result};
use crate::signal::{Dft, C64};

use super::mdf_accumulate;

/// Reusable buffers for [`aec_pass`] and [`aec_pass_adjoint`].
#[derive(Clone, Debug)]
pub struct AecScratch {
    spec: Vec<C64>,
    time: Vec<f64>,
    grad_time: Vec<f64>,
}

impl AecScratch {
    pub fn new(fft_len: usize) -> Self {
        Self {
            spec: vec![C64::default(); fft_len / 2 + 1],
            time: vec![0.0; fft_len],
            grad_time: vec![0.0; fft_len],
        }
    }
}

fn check_history(blocks: usize, bins: usize, sub_blocks: usize, history: &[C64]) -> Result<()> {
    let need = (blocks + sub_blocks - 1) * bins;
    if history.len() < need {
        return Err(Error::Shape(format!(
            "delay line holds {} spectra, need {}",
            history.len() / bins.max(1),
            blocks + sub_blocks - 1
        )));
    }
    Ok(())
}

/// Computes the full-frame error `e = d - y` and its spectrum.
///
/// `theta` is `[B x K]`, `history` holds at least `B + N/R - 1` far-end
/// spectra newest first, `d_frame` is the current `N`-sample mixture frame.
#[allow(clippy::too_many_arguments)]
pub fn aec_pass(
    theta: &[C64],
    blocks: usize,
    history: &[C64],
    d_frame: &[f64],
    hop: usize,
    dft: &mut Dft,
    scratch: &mut AecScratch,
    e_frame: &mut [f64],
    e_spec: &mut [C64],
) -> Result<()> {
    let n = dft.len();
    let k = dft.bins();
    let m = n / hop;
    check_len(blocks * k, theta.len())?;
    check_len(n, d_frame.len())?;
    check_len(n, e_frame.len())?;
    check_len(k, e_spec.len())?;
    check_history(blocks, k, m, history)?;

    for i in 0..m {
        let offset = m - 1 - i;
        let window = &history[offset * k..(offset + blocks) * k];
        mdf_accumulate(theta, window, k, &mut scratch.spec);
        dft.inverse_real_part(&scratch.spec, &mut scratch.time)?;
        let dst = &mut e_frame[i * hop..(i + 1) * hop];
        let src = &scratch.time[n - hop..];
        let d = &d_frame[i * hop..(i + 1) * hop];
        for ((e, &y), &d) in dst.iter_mut().zip(src).zip(d) {
            *e = d - y;
        }
    }
    dft.forward(e_frame, e_spec)
}

/// Accumulates into `grad_theta` the gradient of a loss that depends on the
/// outputs of [`aec_pass`] through `grad_e_frame` and `grad_e_spec`.
#[allow(clippy::too_many_arguments)]
pub fn aec_pass_adjoint(
    blocks: usize,
    history: &[C64],
    hop: usize,
    grad_e_frame: &[f64],
    grad_e_spec: Option<&[C64]>,
    dft: &mut Dft,
    scratch: &mut AecScratch,
    grad_theta: &mut [C64],
) -> Result<()> {
    let n = dft.len();
    let k = dft.bins();
    let m = n / hop;
    check_len(n, grad_e_frame.len())?;
    check_len(blocks * k, grad_theta.len())?;
    check_history(blocks, k, m, history)?;

    // total gradient on the time-domain error frame
    let mut g_e = grad_e_frame.to_vec();
    if let Some(gs) = grad_e_spec {
        dft.forward_adjoint(gs, &mut scratch.grad_time)?;
        for (a, b) in g_e.iter_mut().zip(&scratch.grad_time) {
            *a += b;
        }
    }

    for i in 0..m {
        let offset = m - 1 - i;
        scratch.time.iter_mut().for_each(|x| *x = 0.0);
        // y enters e with a negative sign
        for (dst, g) in scratch.time[n - hop..]
            .iter_mut()
            .zip(&g_e[i * hop..(i + 1) * hop])
        {
            *dst = -g;
        }
        dft.inverse_adjoint(&scratch.time, &mut scratch.spec)?;
        let window = &history[offset * k..(offset + blocks) * k];
        for (gb, ub) in grad_theta.chunks_exact_mut(k).zip(window.chunks_exact(k)) {
            for ((g, gy), u) in gb.iter_mut().zip(&scratch.spec).zip(ub) {
                *g += gy * u.conj();
            }
        }
    }
    Ok(())
}
