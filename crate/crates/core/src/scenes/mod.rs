//! Synthetic scenes with full ground truth.

mod io;
pub mod source;

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

pub use io::{read_scene_dir, write_scene_dir, Scene, SceneMeta};
pub use source::SourceKind;

use crate::error::{Error, Result};
use crate::filters::SteeringVector;
use crate::signal::{FrameConfig, C64, SAMPLE_RATE};

const FS: f64 = SAMPLE_RATE as f64;

/// Echo path length in taps.
pub const ECHO_TAPS: usize = 2048;

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn scale_to_power(x: &mut [f64], target: f64) {
    let p = power(x);
    if p > 0.0 {
        let g = (target / p).sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Linear convolution truncated to the length of `x`.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spec = |sig: &[f64]| {
        let mut buf = vec![0.0; n];
        buf[..sig.len()].copy_from_slice(sig);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("buffer sizes match the plan");
        out
    };
    let xs = spec(x);
    let hs = spec(h);
    let mut prod: Vec<C64> = xs.iter().zip(&hs).map(|(a, b)| a * b / n as f64).collect();
    // the product of real spectra has real endpoints up to round-off
    prod[0].im = 0.0;
    prod[n / 2].im = 0.0;
    let mut out = vec![0.0; n];
    inv.process(&mut prod, &mut out).expect("buffer sizes match the plan");
    out.truncate(x.len());
    out
}

/// Room-like echo path: white noise under an `exp(-6.9 t / rt60)` envelope
/// (60 dB of decay at `t = rt60`), after a 0-4 ms direct-path delay;
/// unit norm, [`ECHO_TAPS`] taps.
pub fn gen_echo_path(seed: u64, rt60: f64) -> Result<Vec<f64>> {
    if !(0.1..=0.5).contains(&rt60) {
        return Err(Error::Config(format!("rt60 {rt60} s outside [0.1, 0.5]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delay = rng.gen_range(0..=(0.004 * FS) as usize);
    let mut w = vec![0.0; ECHO_TAPS];
    for (n, v) in w.iter_mut().enumerate().skip(delay) {
        let t = (n - delay) as f64 / FS;
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        *v = g * (-6.9 * t / rt60).exp();
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    Ok(w)
}

/// Memoryless loudspeaker model: hard clip at the 80th percentile of `|u|`
/// followed by the cubic `(0.5 x + 0.3 x^3) / 0.8` on the clipped signal
/// normalized to `[-1, 1]`.
pub fn loudspeaker(u: &[f64]) -> Vec<f64> {
    let mut mags: Vec<f64> = u.iter().map(|v| v.abs()).collect();
    if mags.is_empty() {
        return Vec::new();
    }
    let idx = ((mags.len() - 1) as f64 * 0.8).round() as usize;
    let (_, c, _) = mags.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    let c = *c;
    if c <= 0.0 {
        return u.to_vec();
    }
    u.iter()
        .map(|&v| {
            let x = v.clamp(-c, c) / c;
            (0.5 * x + 0.3 * x * x * x) / 0.8 * c
        })
        .collect()
}

/// Settings of one echo-cancellation scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AecSceneConfig {
    pub duration: f64,
    /// Near-end speech to echo energy ratio (dB).
    pub ser_db: f64,
    /// Echo to noise energy ratio (dB).
    pub snr_db: f64,
    pub rt60: f64,
    pub nonlinear: bool,
    /// Near-end speech present (from `near_start` to the end).
    pub double_talk: bool,
    /// Near-end onset as a fraction of the duration.
    pub near_start: f64,
    /// Far-end level relative to 0.1 RMS (dB).
    pub far_gain_db: f64,
    pub noise: bool,
}

impl Default for AecSceneConfig {
    fn default() -> Self {
        Self {
            duration: 4.0,
            ser_db: 0.0,
            snr_db: 30.0,
            rt60: 0.3,
            nonlinear: false,
            double_talk: false,
            near_start: 0.5,
            far_gain_db: 0.0,
            noise: false,
        }
    }
}

/// Ranges a dataset draws scene settings from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AecSceneRanges {
    pub duration: f64,
    pub ser_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub rt60: (f64, f64),
    pub nonlinear_prob: f64,
    pub double_talk_prob: f64,
    pub far_gain_db: (f64, f64),
}

impl Default for AecSceneRanges {
    fn default() -> Self {
        Self {
            duration: 4.0,
            ser_db: (-10.0, 10.0),
            snr_db: (0.0, 30.0),
            rt60: (0.1, 0.5),
            nonlinear_prob: 0.5,
            double_talk_prob: 0.5,
            far_gain_db: (-6.0, 6.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl AecSceneRanges {
    /// Settings of scene `seed`, drawn from an RNG independent of the one
    /// that generates the signals.
    pub fn draw(&self, seed: u64) -> AecSceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e5e7_7195_0001);
        AecSceneConfig {
            duration: self.duration,
            ser_db: uniform(&mut rng, self.ser_db),
            snr_db: uniform(&mut rng, self.snr_db),
            rt60: uniform(&mut rng, self.rt60),
            nonlinear: rng.gen_bool(self.nonlinear_prob),
            double_talk: rng.gen_bool(self.double_talk_prob),
            near_start: rng.gen_range(0.3..0.6),
            far_gain_db: uniform(&mut rng, self.far_gain_db),
            noise: true,
        }
    }
}

/// Echo-cancellation scene. `d == d_u + s + n` sample for sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AecScene {
    pub seed: u64,
    pub cfg: AecSceneConfig,
    /// Far-end (loudspeaker input) signal.
    pub u: Vec<f64>,
    /// Microphone mixture.
    pub d: Vec<f64>,
    /// True echo.
    pub d_u: Vec<f64>,
    /// Near-end speech.
    pub s: Vec<f64>,
    pub n: Vec<f64>,
    /// Echo path.
    pub w: Vec<f64>,
}

impl AecScene {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

pub fn gen_aec_scene(seed: u64, cfg: &AecSceneConfig, source: &SourceKind) -> Result<AecScene> {
    if cfg.duration <= 0.0 {
        return Err(Error::Config("scene duration must be positive".into()));
    }
    if !(-10.0..=10.0).contains(&cfg.ser_db) || !(0.0..=30.0).contains(&cfg.snr_db) {
        return Err(Error::Config(format!(
            "SER {} dB / SNR {} dB outside [-10, 10] / [0, 30]",
            cfg.ser_db, cfg.snr_db
        )));
    }
    let len = (cfg.duration * FS).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let far_rms = 0.1 * 10f64.powf(cfg.far_gain_db / 20.0);
    let u: Vec<f64> = source.draw(&mut rng, len).into_iter().map(|v| v * far_rms).collect();
    let w = gen_echo_path(rng.next_u64(), cfg.rt60)?;
    let driven = if cfg.nonlinear { loudspeaker(&u) } else { u.clone() };
    let d_u = convolve(&driven, &w);
    let echo_power = power(&d_u);

    let mut s = if cfg.double_talk {
        let mut s = source.draw(&mut rng, len);
        let onset = (cfg.near_start * len as f64) as usize;
        let ramp = (0.01 * FS) as usize;
        for (i, v) in s.iter_mut().enumerate() {
            let g = if i < onset {
                0.0
            } else if i < onset + ramp {
                0.5 - 0.5 * (PI * (i - onset) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            *v *= g;
        }
        s
    } else {
        vec![0.0; len]
    };
    if cfg.double_talk {
        scale_to_power(&mut s, echo_power * 10f64.powf(cfg.ser_db / 10.0));
    }

    let mut n = vec![0.0; len];
    if cfg.noise {
        let white = source::white_noise(&mut rng, len);
        let pink = source::pink_noise(&mut rng, len);
        for (o, (a, b)) in n.iter_mut().zip(white.iter().zip(&pink)) {
            *o = (0.5f64).sqrt() * (a + b);
        }
        scale_to_power(&mut n, echo_power * 10f64.powf(-cfg.snr_db / 10.0));
    }

    let d = (0..len).map(|i| d_u[i] + s[i] + n[i]).collect();
    Ok(AecScene {
        seed,
        cfg: cfg.clone(),
        u,
        d,
        d_u,
        s,
        n,
        w,
    })
}

/// Settings of one beamforming scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GscSceneConfig {
    pub duration: f64,
    pub mics: usize,
    /// Microphone spacing of the uniform linear array (m).
    pub spacing: f64,
    /// Target direction of arrival from broadside (degrees).
    pub doa_deg: f64,
    /// Interferer direction of arrival, or `None` for no interferer.
    pub interferer_doa_deg: Option<f64>,
    /// Target to interferer energy ratio at the array (dB).
    pub sir_db: f64,
    /// Target to sensor-noise energy ratio per microphone (dB).
    pub snr_db: f64,
    /// Reverberant tails: decay time and level relative to the direct path.
    pub tail_rt60: f64,
    pub tail_db: Option<f64>,
}

impl Default for GscSceneConfig {
    fn default() -> Self {
        Self {
            duration: 4.0,
            mics: 4,
            spacing: 0.05,
            doa_deg: 0.0,
            interferer_doa_deg: Some(50.0),
            sir_db: 0.0,
            snr_db: 20.0,
            tail_rt60: 0.15,
            tail_db: Some(-20.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GscSceneRanges {
    pub duration: f64,
    pub mics: usize,
    pub spacing: f64,
    pub doa_deg: (f64, f64),
    /// Minimum angular separation between target and interferer.
    pub min_separation_deg: f64,
    pub sir_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub tail_db: (f64, f64),
}

impl Default for GscSceneRanges {
    fn default() -> Self {
        Self {
            duration: 4.0,
            mics: 4,
            spacing: 0.05,
            doa_deg: (-60.0, 60.0),
            min_separation_deg: 30.0,
            sir_db: (-5.0, 5.0),
            snr_db: (10.0, 30.0),
            tail_db: (-25.0, -15.0),
        }
    }
}

impl GscSceneRanges {
    pub fn draw(&self, seed: u64) -> GscSceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x65c0_5ce7_e000_0002);
        let doa = uniform(&mut rng, self.doa_deg);
        let interferer = loop {
            let i: f64 = rng.gen_range(-80.0..80.0);
            if (i - doa).abs() >= self.min_separation_deg {
                break i;
            }
        };
        GscSceneConfig {
            duration: self.duration,
            mics: self.mics,
            spacing: self.spacing,
            doa_deg: doa,
            interferer_doa_deg: Some(interferer),
            sir_db: uniform(&mut rng, self.sir_db),
            snr_db: uniform(&mut rng, self.snr_db),
            tail_rt60: 0.15,
            tail_db: Some(uniform(&mut rng, self.tail_db)),
        }
    }
}

/// Beamforming scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GscScene {
    pub seed: u64,
    pub cfg: GscSceneConfig,
    /// Microphone signals `[M][T]`.
    pub mics: Vec<Vec<f64>>,
    /// Direct-path target at the array centre; the SI-SDR reference.
    pub target: Vec<f64>,
    /// Target images at the microphones, including reverberant tails.
    pub target_images: Vec<Vec<f64>>,
    pub interferer_images: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    /// Per-microphone source-to-mic impulse responses of the target.
    pub rirs: Vec<Vec<f64>>,
    pub steering: SteeringVector,
    /// Arrival delays (s) relative to the array centre.
    pub delays: Vec<f64>,
}

/// Half-length of the fractional-delay interpolator; also the bulk delay in
/// samples every microphone image carries.
pub const FRACTIONAL_DELAY_HALF: usize = 32;

fn fractional_delay(delay_samples: f64) -> Vec<f64> {
    let len = 2 * FRACTIONAL_DELAY_HALF + 1;
    (0..len)
        .map(|i| {
            let x = i as f64 - FRACTIONAL_DELAY_HALF as f64 - delay_samples;
            let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let w = 0.5 + 0.5 * (PI * x / (FRACTIONAL_DELAY_HALF as f64 + 1.0)).cos();
            if x.abs() <= FRACTIONAL_DELAY_HALF as f64 + 1.0 {
                sinc * w
            } else {
                0.0
            }
        })
        .collect()
}

/// Far-field arrival delays (s) of a uniform linear array relative to its
/// centre.
pub fn array_delays(mics: usize, spacing: f64, doa_deg: f64) -> Vec<f64> {
    let s = doa_deg.to_radians().sin();
    (0..mics)
        .map(|m| {
            let x = (m as f64 - (mics as f64 - 1.0) / 2.0) * spacing;
            x * s / SPEED_OF_SOUND
        })
        .collect()
}

fn source_rirs(rng: &mut ChaCha8Rng, delays: &[f64], tail: Option<(f64, f64)>) -> Vec<Vec<f64>> {
    delays
        .iter()
        .map(|&tau| {
            let mut h = fractional_delay(tau * FS);
            if let Some((rt60, level_db)) = tail {
                let start = FRACTIONAL_DELAY_HALF + (0.002 * FS) as usize;
                let len = start + (rt60 * FS) as usize;
                h.resize(len, 0.0);
                let mut t: Vec<f64> = (start..len)
                    .map(|n| {
                        let g: f64 = rng.sample(rand_distr::StandardNormal);
                        g * (-6.9 * (n - start) as f64 / FS / rt60).exp()
                    })
                    .collect();
                let e: f64 = t.iter().map(|v| v * v).sum();
                let g = (10f64.powf(level_db / 10.0) / e).sqrt();
                t.iter_mut().for_each(|v| *v *= g);
                for (dst, v) in h[start..].iter_mut().zip(t) {
                    *dst += v;
                }
            }
            h
        })
        .collect()
}

pub fn gen_gsc_scene(seed: u64, cfg: &GscSceneConfig, source: &SourceKind, frames: FrameConfig) -> Result<GscScene> {
    if cfg.mics < 2 || cfg.spacing <= 0.0 || cfg.duration <= 0.0 {
        return Err(Error::Config("beamforming scene needs >= 2 mics, positive spacing and duration".into()));
    }
    let len = (cfg.duration * FS).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<f64> = source.draw(&mut rng, len).into_iter().map(|v| v * 0.1).collect();
    let delays = array_delays(cfg.mics, cfg.spacing, cfg.doa_deg);
    let tail = cfg.tail_db.map(|db| (cfg.tail_rt60, db));
    let rirs = source_rirs(&mut rng, &delays, tail);
    let target = convolve(&s, &fractional_delay(0.0));
    let target_images: Vec<Vec<f64>> = rirs.iter().map(|h| convolve(&s, h)).collect();
    let target_power = power(&target);

    let interferer_images = match cfg.interferer_doa_deg {
        Some(doa) => {
            let mut i = source.draw(&mut rng, len);
            scale_to_power(&mut i, target_power * 10f64.powf(-cfg.sir_db / 10.0));
            let idelays = array_delays(cfg.mics, cfg.spacing, doa);
            source_rirs(&mut rng, &idelays, tail)
                .iter()
                .map(|h| convolve(&i, h))
                .collect()
        }
        None => vec![vec![0.0; len]; cfg.mics],
    };
    let noise: Vec<Vec<f64>> = (0..cfg.mics)
        .map(|_| {
            let white = source::white_noise(&mut rng, len);
            let pink = source::pink_noise(&mut rng, len);
            let mut n: Vec<f64> = white.iter().zip(&pink).map(|(a, b)| (0.5f64).sqrt() * (a + b)).collect();
            scale_to_power(&mut n, target_power * 10f64.powf(-cfg.snr_db / 10.0));
            n
        })
        .collect();
    let mics = (0..cfg.mics)
        .map(|m| {
            (0..len)
                .map(|i| target_images[m][i] + interferer_images[m][i] + noise[m][i])
                .collect()
        })
        .collect();
    let steering = SteeringVector::from_delays(&delays, frames);
    Ok(GscScene {
        seed,
        cfg: cfg.clone(),
        mics,
        target,
        target_images,
        interferer_images,
        noise,
        rirs,
        steering,
        delays,
    })
}
