use std::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::signal::{FrameConfig, C64, SAMPLE_RATE};

/// Per-bin array response toward the target, normalized so `v^H v = M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector {
    mics: usize,
    bins: usize,
    v: Vec<C64>,
}

impl SteeringVector {
    /// Far-field steering vector for per-microphone arrival delays (seconds,
    /// relative to the array reference point).
    pub fn from_delays(delays: &[f64], cfg: FrameConfig) -> Self {
        let bins = cfg.bins();
        let mut v = Vec::with_capacity(delays.len() * bins);
        for &tau in delays {
            for k in 0..bins {
                let f = k as f64 * SAMPLE_RATE as f64 / cfg.fft_len() as f64;
                v.push(C64::from_polar(1.0, -2.0 * PI * f * tau));
            }
        }
        Self {
            mics: delays.len(),
            bins,
            v,
        }
    }

    /// Rescales each bin of an arbitrary response to `v^H v = M`.
    pub fn from_response(mics: usize, bins: usize, mut v: Vec<C64>) -> Result<Self> {
        check_len(mics * bins, v.len())?;
        for k in 0..bins {
            let energy: f64 = (0..mics).map(|m| v[m * bins + k].norm_sqr()).sum();
            if energy <= 0.0 || !energy.is_finite() {
                return Err(Error::Degenerate(format!("steering vector vanishes at bin {k}")));
            }
            let scale = (mics as f64 / energy).sqrt();
            for m in 0..mics {
                v[m * bins + k] *= scale;
            }
        }
        Ok(Self { mics, bins, v })
    }

    pub fn mics(&self) -> usize {
        self.mics
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[C64] {
        &self.v
    }
}

/// Adaptive GSC weights `[M x K]` plus the fixed steering vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GscParams {
    pub weights: Vec<C64>,
    pub steering: SteeringVector,
}

impl GscParams {
    pub fn zeros(steering: SteeringVector) -> Self {
        Self {
            weights: vec![C64::default(); steering.mics() * steering.bins()],
            steering,
        }
    }

    pub fn mics(&self) -> usize {
        self.steering.mics()
    }

    pub fn bins(&self) -> usize {
        self.steering.bins()
    }
}

/// Splits microphone spectra into the fixed beam `v^H U / M` and the blocked
/// channels `(I - v v^H / M) U`.
pub fn gsc_decompose(v: &SteeringVector, u_mics: &[C64]) -> Result<(Vec<C64>, Vec<C64>)> {
    let (mics, bins) = (v.mics(), v.bins());
    check_len(mics * bins, u_mics.len())?;
    let mut fixed = vec![C64::default(); bins];
    let vals = v.values();
    for m in 0..mics {
        for k in 0..bins {
            fixed[k] += vals[m * bins + k].conj() * u_mics[m * bins + k];
        }
    }
    let inv_m = 1.0 / mics as f64;
    fixed.iter_mut().for_each(|f| *f *= inv_m);
    let mut blocked = u_mics.to_vec();
    for m in 0..mics {
        for k in 0..bins {
            blocked[m * bins + k] -= vals[m * bins + k] * fixed[k];
        }
    }
    Ok((fixed, blocked))
}

/// `e_k = fixed_k - sum_m conj(theta[m,k]) z[m,k]`.
pub fn gsc_error(theta: &[C64], fixed: &[C64], blocked: &[C64], out: &mut [C64]) -> Result<()> {
    let bins = fixed.len();
    check_len(blocked.len(), theta.len())?;
    check_len(bins, out.len())?;
    if bins == 0 || blocked.len() % bins != 0 {
        return Err(Error::Shape("blocked channels do not tile the bins".into()));
    }
    out.copy_from_slice(fixed);
    for (tm, zm) in theta.chunks_exact(bins).zip(blocked.chunks_exact(bins)) {
        for ((o, t), z) in out.iter_mut().zip(tm).zip(zm) {
            *o -= t.conj() * z;
        }
    }
    Ok(())
}

/// Gradient of a loss through [`gsc_error`] with respect to the weights.
pub fn gsc_error_adjoint(blocked: &[C64], grad_e: &[C64], grad_theta: &mut [C64]) -> Result<()> {
    let bins = grad_e.len();
    check_len(blocked.len(), grad_theta.len())?;
    for (gm, zm) in grad_theta.chunks_exact_mut(bins).zip(blocked.chunks_exact(bins)) {
        for ((g, ge), z) in gm.iter_mut().zip(grad_e).zip(zm) {
            *g -= ge.conj() * z;
        }
    }
    Ok(())
}

/// Beamformer output spectrum for one frame of microphone spectra `[M x K]`.
pub fn gsc_forward(p: &GscParams, u_mics: &[C64]) -> Result<Vec<C64>> {
    check_len(p.mics() * p.bins(), p.weights.len())?;
    let (fixed, blocked) = gsc_decompose(&p.steering, u_mics)?;
    let mut e = vec![C64::default(); p.bins()];
    gsc_error(&p.weights, &fixed, &blocked, &mut e)?;
    Ok(e)
}
