use std::fmt;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::{FrameConfig, C64};
use crate::error::{check_len, Error, Result};

/// One-sided real DFT of length `N` with `K = N/2 + 1` bins.
///
/// Forward: `X[k] = sum_n x[n] exp(-j 2 pi k n / N)`. The inverse is
/// normalized by `1/N` so that `inverse(forward(x)) == x`.
///
/// Plans are shared behind `Arc`, so cloning is cheap; each clone owns its own
/// scratch space and can be moved to another thread.
#[derive(Clone)]
pub struct Dft {
    len: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
    time: Vec<f64>,
    spec: Vec<C64>,
    scratch_fwd: Vec<C64>,
    scratch_inv: Vec<C64>,
}

impl fmt::Debug for Dft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dft").field("len", &self.len).finish()
    }
}

impl Dft {
    pub fn new(cfg: FrameConfig) -> Self {
        Self::with_len(cfg.fft_len())
    }

    /// Transform of an arbitrary even length (used for long convolutions).
    pub fn with_len(len: usize) -> Self {
        assert!(len >= 2 && len % 2 == 0, "dft length must be even");
        let mut planner = RealFftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let scratch_fwd = fwd.make_scratch_vec();
        let scratch_inv = inv.make_scratch_vec();
        Self {
            len,
            time: vec![0.0; len],
            spec: vec![C64::default(); len / 2 + 1],
            fwd,
            inv,
            scratch_fwd,
            scratch_inv,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    pub fn forward(&mut self, frame: &[f64], out: &mut [C64]) -> Result<()> {
        check_len(self.len, frame.len())?;
        check_len(self.bins(), out.len())?;
        self.time.copy_from_slice(frame);
        self.fwd
            .process_with_scratch(&mut self.time, out, &mut self.scratch_fwd)
            .expect("buffer sizes checked above");
        Ok(())
    }

    pub fn forward_vec(&mut self, frame: &[f64]) -> Result<Vec<C64>> {
        let mut out = vec![C64::default(); self.bins()];
        self.forward(frame, &mut out)?;
        Ok(out)
    }

    /// Inverse transform of a Hermitian-consistent one-sided spectrum.
    ///
    /// Bins `0` and `K-1` must be real (to a relative tolerance of `1e-9`).
    pub fn inverse(&mut self, spec: &[C64], out: &mut [f64]) -> Result<()> {
        check_len(self.bins(), spec.len())?;
        let scale = spec.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
        for &bin in &[0, self.bins() - 1] {
            let imag = spec[bin].im;
            if imag.abs() > 1e-9 * scale {
                return Err(Error::NonRealEndpoint { bin, imag });
            }
        }
        self.inverse_real_part(spec, out)
    }

    /// Inverse transform that discards the imaginary parts of bins `0` and
    /// `K-1`, i.e. the real signal whose spectrum is closest to `spec`.
    pub fn inverse_real_part(&mut self, spec: &[C64], out: &mut [f64]) -> Result<()> {
        check_len(self.bins(), spec.len())?;
        check_len(self.len, out.len())?;
        self.spec.copy_from_slice(spec);
        let last = self.bins() - 1;
        self.spec[0].im = 0.0;
        self.spec[last].im = 0.0;
        self.inv
            .process_with_scratch(&mut self.spec, out, &mut self.scratch_inv)
            .expect("endpoints zeroed above");
        let norm = 1.0 / self.len as f64;
        out.iter_mut().for_each(|x| *x *= norm);
        Ok(())
    }

    pub fn inverse_vec(&mut self, spec: &[C64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len];
        self.inverse(spec, &mut out)?;
        Ok(out)
    }

    /// Adjoint of [`Dft::forward`] for real-valued losses.
    ///
    /// Gradients of complex quantities use the convention
    /// `g = dL/dRe + j dL/dIm`. Given that gradient for every bin, returns
    /// `dL/dx[n] = Re sum_k g[k] exp(+j 2 pi k n / N)`.
    pub fn forward_adjoint(&mut self, grad_spec: &[C64], grad_time: &mut [f64]) -> Result<()> {
        check_len(self.bins(), grad_spec.len())?;
        check_len(self.len, grad_time.len())?;
        let last = self.bins() - 1;
        for (k, (dst, g)) in self.spec.iter_mut().zip(grad_spec).enumerate() {
            *dst = if k == 0 || k == last {
                C64::new(g.re, 0.0)
            } else {
                g * 0.5
            };
        }
        self.inv
            .process_with_scratch(&mut self.spec, grad_time, &mut self.scratch_inv)
            .expect("endpoints are real");
        Ok(())
    }

    /// Adjoint of [`Dft::inverse_real_part`], same gradient convention as
    /// [`Dft::forward_adjoint`].
    pub fn inverse_adjoint(&mut self, grad_time: &[f64], grad_spec: &mut [C64]) -> Result<()> {
        check_len(self.len, grad_time.len())?;
        check_len(self.bins(), grad_spec.len())?;
        self.time.copy_from_slice(grad_time);
        self.fwd
            .process_with_scratch(&mut self.time, grad_spec, &mut self.scratch_fwd)
            .expect("buffer sizes checked above");
        let last = self.bins() - 1;
        let n = self.len as f64;
        for (k, g) in grad_spec.iter_mut().enumerate() {
            if k == 0 || k == last {
                *g = C64::new(g.re / n, 0.0);
            } else {
                *g *= 2.0 / n;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut dft = Dft::new(FrameConfig::default());
        let mut x = vec![0.0; 512];
        x[0] = 1.0;
        let spec = dft.forward_vec(&x).unwrap();
        assert!(spec.iter().all(|c| (c - C64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn constant_maps_to_dc() {
        let mut dft = Dft::new(FrameConfig::default());
        let spec = dft.forward_vec(&vec![0.25; 512]).unwrap();
        assert!((spec[0] - C64::new(128.0, 0.0)).norm() < 1e-9);
        assert!(spec[1..].iter().all(|c| c.norm() < 1e-9));
    }

    #[test]
    fn all_ones_spectrum_is_impulse() {
        let mut dft = Dft::new(FrameConfig::default());
        let x = dft.inverse_vec(&vec![C64::new(1.0, 0.0); 257]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn non_real_endpoint_rejected() {
        let mut dft = Dft::new(FrameConfig::default());
        let mut spec = vec![C64::default(); 257];
        spec[256] = C64::new(0.0, 1.0);
        assert!(matches!(
            dft.inverse_vec(&spec),
            Err(Error::NonRealEndpoint { bin: 256, .. })
        ));
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <F x, g> == <x, F* g> with the real inner product on complex vectors.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dft = Dft::with_len(16);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<C64> = (0..9)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let fx = dft.forward_vec(&x).unwrap();
        let lhs: f64 = fx.iter().zip(&g).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let mut adj = vec![0.0; 16];
        dft.forward_adjoint(&g, &mut adj).unwrap();
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");

        let gt: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 16];
        dft.inverse_real_part(&g, &mut y).unwrap();
        let lhs: f64 = y.iter().zip(&gt).map(|(a, b)| a * b).sum();
        let mut adj = vec![C64::default(); 9];
        dft.inverse_adjoint(&gt, &mut adj).unwrap();
        let rhs: f64 = g.iter().zip(&adj).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
