//! Hand-derived baseline optimizers: NLMS, a diagonal frequency-domain Kalman
//! filter and per-bin RLS.
//!
//! The rules are written for the MDF convention `e = d - sum_b theta_b u_b`.
//! For the GSC (`e = y - sum_m conj(theta_m) z_m`) the same rule applied to
//! `conj(theta)` gives the update, so GSC updates are conjugated on output.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::signal::C64;
use crate::update::{FilterKind, UpdateInput, UpdateRule};

fn check_input(input: &UpdateInput<'_>, delta: &[C64]) -> Result<()> {
    let n = input.taps * input.bins;
    check_len(n, input.input.len())?;
    check_len(n, input.theta.len())?;
    check_len(n, delta.len())?;
    check_len(input.bins, input.error.len())
}

fn orient(kind: FilterKind, delta: &mut [C64]) {
    if kind == FilterKind::Gsc {
        delta.iter_mut().for_each(|d| *d = d.conj());
    }
}

/// Normalized LMS: `Delta[b,k] = lambda conj(U[b,k]) e_k / (sum_b |U[b,k]|^2 + eps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nlms {
    pub step_size: f64,
    pub regularizer: f64,
}

impl Default for Nlms {
    fn default() -> Self {
        Self {
            step_size: 1.5,
            regularizer: 100.0,
        }
    }
}

impl Nlms {
    /// Grid-searched setting for the beamformer; [`Nlms::default`] is the
    /// echo canceller's.
    pub fn beamformer() -> Self {
        Self {
            step_size: 0.5,
            regularizer: 300.0,
        }
    }

    pub fn new(step_size: f64, regularizer: f64) -> Result<Self> {
        if !(step_size > 0.0 && step_size < 2.0) {
            return Err(Error::Config(format!("nlms step size {step_size} outside (0, 2)")));
        }
        if regularizer < 0.0 {
            return Err(Error::Config("nlms regularizer must be >= 0".into()));
        }
        Ok(Self {
            step_size,
            regularizer,
        })
    }
}

impl UpdateRule for Nlms {
    type State = ();

    fn init_state(&self, _taps: usize, _bins: usize) {}

    fn step(&self, _: &mut (), input: &UpdateInput<'_>, delta: &mut [C64]) -> Result<()> {
        check_input(input, delta)?;
        let k = input.bins;
        let mut power = vec![self.regularizer; k];
        for ub in input.input.chunks_exact(k) {
            for (p, u) in power.iter_mut().zip(ub) {
                *p += u.norm_sqr();
            }
        }
        for (db, ub) in delta.chunks_exact_mut(k).zip(input.input.chunks_exact(k)) {
            for (((d, u), e), p) in db.iter_mut().zip(ub).zip(input.error).zip(&power) {
                *d = if *p > 0.0 {
                    u.conj() * e * (self.step_size / p)
                } else {
                    C64::default()
                };
            }
        }
        orient(input.kind, delta);
        Ok(())
    }
}

/// Diagonal frequency-domain Kalman filter hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kalman {
    /// State transition factor `A`.
    pub transition: f64,
    /// Process-noise floor `q_min`.
    pub process_floor: f64,
    /// Smoothing of the observation-noise estimate.
    pub noise_smoothing: f64,
    /// Initial error covariance.
    pub initial_covariance: f64,
    /// Guard added to every denominator.
    pub eps: f64,
}

impl Default for Kalman {
    fn default() -> Self {
        Self {
            transition: 0.98,
            process_floor: 1e-3,
            noise_smoothing: 0.99,
            initial_covariance: 1e-2,
            eps: 1e-12,
        }
    }
}

/// Per-stream Kalman state: diagonal covariance `[B x K]` and observation
/// noise estimate `[K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub covariance: Vec<f64>,
    pub noise: Vec<f64>,
}

impl Kalman {
    pub fn validate(&self) -> Result<()> {
        if !(self.transition > 0.0 && self.transition <= 1.0) {
            return Err(Error::Config("kalman transition must lie in (0, 1]".into()));
        }
        if self.process_floor < 0.0 || self.initial_covariance < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("kalman noise terms must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.noise_smoothing) {
            return Err(Error::Config("kalman smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

impl UpdateRule for Kalman {
    type State = KalmanState;

    fn init_state(&self, taps: usize, bins: usize) -> KalmanState {
        KalmanState {
            covariance: vec![self.initial_covariance; taps * bins],
            noise: vec![0.0; bins],
        }
    }

    fn step(&self, s: &mut KalmanState, input: &UpdateInput<'_>, delta: &mut [C64]) -> Result<()> {
        check_input(input, delta)?;
        check_len(input.taps * input.bins, s.covariance.len())?;
        check_len(input.bins, s.noise.len())?;
        let k = input.bins;
        let a2 = self.transition * self.transition;

        // predict
        for (p, th) in s.covariance.iter_mut().zip(input.theta) {
            *p = a2 * *p + (1.0 - a2) * th.norm_sqr() + self.process_floor;
        }

        let mut den = s.noise.iter().map(|n| n + self.eps).collect::<Vec<_>>();
        for (pb, ub) in s.covariance.chunks_exact(k).zip(input.input.chunks_exact(k)) {
            for ((d, p), u) in den.iter_mut().zip(pb).zip(ub) {
                *d += u.norm_sqr() * p;
            }
        }

        // gain, update, correct
        for ((db, pb), ub) in delta
            .chunks_exact_mut(k)
            .zip(s.covariance.chunks_exact_mut(k))
            .zip(input.input.chunks_exact(k))
        {
            for (((d, p), u), (e, den)) in db.iter_mut().zip(pb).zip(ub).zip(input.error.iter().zip(&den)) {
                let gain = u.conj() * (*p / den);
                *d = gain * e;
                let shrink = (1.0 - (gain * u).re).clamp(0.0, 1.0);
                *p *= shrink;
            }
        }

        let a = self.noise_smoothing;
        for (n, e) in s.noise.iter_mut().zip(input.error) {
            *n = a * *n + (1.0 - a) * e.norm_sqr();
        }
        orient(input.kind, delta);
        Ok(())
    }
}

/// Exponentially weighted recursive least squares, one `M x M` inverse
/// correlation matrix per bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rls {
    pub forgetting: f64,
    pub regularizer: f64,
}

impl Default for Rls {
    fn default() -> Self {
        Self {
            forgetting: 0.999,
            regularizer: 10.0,
        }
    }
}

/// Inverse correlation matrices `[K x M x M]`, row-major per bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub taps: usize,
    pub inverse: Vec<C64>,
    /// Number of bins re-initialized after losing positive definiteness.
    pub resets: u64,
}

impl Rls {
    pub fn new(forgetting: f64, regularizer: f64) -> Result<Self> {
        if !(forgetting > 0.0 && forgetting < 1.0) {
            return Err(Error::Config("rls forgetting factor must lie in (0, 1)".into()));
        }
        if regularizer <= 0.0 {
            return Err(Error::Config("rls regularizer must be > 0".into()));
        }
        Ok(Self {
            forgetting,
            regularizer,
        })
    }

    fn reset_bin(&self, inv: &mut [C64], m: usize) {
        inv.iter_mut().for_each(|c| *c = C64::default());
        for i in 0..m {
            inv[i * m + i] = C64::new(1.0 / self.regularizer, 0.0);
        }
    }
}

impl UpdateRule for Rls {
    type State = RlsState;

    fn init_state(&self, taps: usize, bins: usize) -> RlsState {
        let mut inverse = vec![C64::default(); bins * taps * taps];
        for inv in inverse.chunks_exact_mut(taps * taps) {
            self.reset_bin(inv, taps);
        }
        RlsState {
            taps,
            inverse,
            resets: 0,
        }
    }

    fn step(&self, s: &mut RlsState, input: &UpdateInput<'_>, delta: &mut [C64]) -> Result<()> {
        check_input(input, delta)?;
        let (m, k) = (input.taps, input.bins);
        check_len(k * m * m, s.inverse.len())?;
        let mut z = vec![C64::default(); m];
        let mut pi = vec![C64::default(); m];
        for bin in 0..k {
            // Work in the GSC convention: z is the regressor, Delta = g conj(e).
            for t in 0..m {
                let x = input.input[t * k + bin];
                z[t] = match input.kind {
                    FilterKind::Gsc => x,
                    FilterKind::Mdf => x.conj(),
                };
            }
            let e = match input.kind {
                FilterKind::Gsc => input.error[bin],
                FilterKind::Mdf => input.error[bin].conj(),
            };
            let inv = &mut s.inverse[bin * m * m..(bin + 1) * m * m];
            for i in 0..m {
                pi[i] = (0..m).map(|j| inv[i * m + j] * z[j]).sum();
            }
            let den = self.forgetting + z.iter().zip(&pi).map(|(a, b)| a.conj() * b).sum::<C64>();
            if !(den.re > 0.0) || !den.re.is_finite() {
                warn!("rls bin {bin} lost positive definiteness; re-initializing");
                self.reset_bin(inv, m);
                s.resets += 1;
                for t in 0..m {
                    delta[t * k + bin] = C64::default();
                }
                continue;
            }
            let inv_den = 1.0 / den.re;
            for t in 0..m {
                let g = pi[t] * inv_den;
                let d = g * e.conj();
                delta[t * k + bin] = match input.kind {
                    FilterKind::Gsc => d,
                    FilterKind::Mdf => d.conj(),
                };
            }
            let inv_gamma = 1.0 / self.forgetting;
            for i in 0..m {
                for j in 0..m {
                    inv[i * m + j] = (inv[i * m + j] - pi[i] * pi[j].conj() * inv_den) * inv_gamma;
                }
            }
            // keep exactly Hermitian against round-off drift
            for i in 0..m {
                inv[i * m + i].im = 0.0;
                for j in i + 1..m {
                    let avg = (inv[i * m + j] + inv[j * m + i].conj()) * 0.5;
                    inv[i * m + j] = avg;
                    inv[j * m + i] = avg.conj();
                }
            }
            if (0..m).any(|i| !(inv[i * m + i].re > 0.0)) {
                warn!("rls bin {bin} lost positive definiteness; re-initializing");
                self.reset_bin(inv, m);
                s.resets += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input<'a>(kind: FilterKind, taps: usize, bins: usize, u: &'a [C64], e: &'a [C64], th: &'a [C64]) -> UpdateInput<'a> {
        UpdateInput {
            kind,
            taps,
            bins,
            input: u,
            error: e,
            theta: th,
        }
    }

    #[test]
    fn nlms_zero_error_gives_zero_update() {
        let u = vec![C64::new(1.0, 1.0); 4];
        let e = vec![C64::default(); 2];
        let th = vec![C64::default(); 4];
        let mut d = vec![C64::new(9.0, 9.0); 4];
        Nlms::default()
            .step(&mut (), &input(FilterKind::Mdf, 2, 2, &u, &e, &th), &mut d)
            .unwrap();
        assert!(d.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn nlms_closed_form_scalar() {
        let nlms = Nlms::new(0.5, 0.0).unwrap();
        let u = [C64::new(1.0, 0.0)];
        let e = [C64::new(1.0, 0.0)];
        let th = [C64::default()];
        let mut d = [C64::default()];
        nlms.step(&mut (), &input(FilterKind::Mdf, 1, 1, &u, &e, &th), &mut d).unwrap();
        assert_eq!(d[0], C64::new(0.5, 0.0));
    }

    #[test]
    fn nlms_silent_input_is_finite() {
        let nlms = Nlms::new(0.5, 0.0).unwrap();
        let u = [C64::default(); 2];
        let e = [C64::new(1.0, 0.0)];
        let th = [C64::default(); 2];
        let mut d = [C64::new(1.0, 1.0); 2];
        nlms.step(&mut (), &input(FilterKind::Mdf, 2, 1, &u, &e, &th), &mut d).unwrap();
        assert!(d.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn nlms_rejects_unstable_step() {
        assert!(Nlms::new(2.0, 1e-6).is_err());
        assert!(Nlms::new(0.0, 1e-6).is_err());
    }

    #[test]
    fn kalman_without_confidence_does_not_move() {
        let kf = Kalman {
            initial_covariance: 0.0,
            process_floor: 0.0,
            ..Kalman::default()
        };
        let mut s = kf.init_state(2, 3);
        let u = vec![C64::new(1.0, -1.0); 6];
        let e = vec![C64::new(2.0, 0.5); 3];
        let th = vec![C64::default(); 6];
        let mut d = vec![C64::new(1.0, 1.0); 6];
        kf.step(&mut s, &input(FilterKind::Mdf, 2, 3, &u, &e, &th), &mut d).unwrap();
        assert!(d.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn rls_zero_error_still_updates_correlation() {
        let rls = Rls::default();
        let mut s = rls.init_state(2, 1);
        let before = s.inverse.clone();
        let z = [C64::new(1.0, 0.5), C64::new(-0.3, 0.2)];
        let e = [C64::default()];
        let th = [C64::default(); 2];
        let mut d = [C64::new(1.0, 1.0); 2];
        rls.step(&mut s, &input(FilterKind::Gsc, 2, 1, &z, &e, &th), &mut d).unwrap();
        assert!(d.iter().all(|c| c.norm() == 0.0));
        assert_ne!(before, s.inverse);
    }
}
