//! Source material: a speech-like synthesizer, modulated noise, and excerpts
//! of ingested recordings.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::signal::SAMPLE_RATE;

const FS: f64 = SAMPLE_RATE as f64;

/// Two-pole resonator with unity gain at its centre frequency (approximately).
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let r = (-PI * bandwidth / FS).exp();
        let theta = 2.0 * PI * freq / FS;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: (1.0 - r) * (1.0 + r * r - 2.0 * r * (2.0 * theta).cos()).sqrt().max(1e-3),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64) {
        let fresh = Self::new(freq, bandwidth);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.gain = fresh.gain;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn normalize_rms(x: &mut [f64]) {
    let active: Vec<f64> = x.iter().copied().filter(|v| v.abs() > 0.0).collect();
    let p = active.iter().map(|v| v * v).sum::<f64>() / active.len().max(1) as f64;
    if p > 0.0 {
        let g = 1.0 / p.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Speech-like signal: phrases of voiced and unvoiced syllables shaped by
/// three formant resonators, separated by pauses. Unit RMS over its active
/// samples.
pub fn speech_like(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut formants = [
        Resonator::new(500.0, 80.0),
        Resonator::new(1500.0, 120.0),
        Resonator::new(2500.0, 160.0),
    ];
    let mut t = (rng.gen_range(0.0..0.3) * FS) as usize;
    let mut glottal = 0.0;
    while t < len {
        let syllables = rng.gen_range(3..9);
        let f0_base: f64 = rng.gen_range(90.0..240.0);
        let mut phase = 0.0;
        for s in 0..syllables {
            let dur = (rng.gen_range(0.08..0.3) * FS) as usize;
            let voiced = rng.gen_bool(0.75);
            let f = [
                rng.gen_range(300.0..900.0),
                rng.gen_range(900.0..2500.0),
                rng.gen_range(2300.0..3600.0),
            ];
            for (r, (&fr, bw)) in formants.iter_mut().zip(f.iter().zip([80.0, 120.0, 160.0])) {
                r.retune(fr, bw);
            }
            let gain = rng.gen_range(0.4..1.0);
            let decl = 1.0 - 0.15 * s as f64 / syllables as f64;
            for i in 0..dur {
                let n = t + i;
                if n >= len {
                    break;
                }
                let env = (PI * i as f64 / dur as f64).sin().powi(2);
                let noise: f64 = rng.sample(StandardNormal);
                let exc = if voiced {
                    let f0 = f0_base * decl * (1.0 + 0.02 * (2.0 * PI * 5.0 * n as f64 / FS).sin());
                    phase += f0 / FS;
                    let pulse = if phase >= 1.0 {
                        phase -= 1.0;
                        1.0
                    } else {
                        0.0
                    };
                    glottal = 0.9 * glottal + pulse;
                    glottal + 0.03 * noise
                } else {
                    0.3 * noise
                };
                let y = formants.iter_mut().map(|r| r.tick(exc)).sum::<f64>();
                out[n] = gain * env * y;
            }
            t += dur;
        }
        t += (rng.gen_range(0.15..0.7) * FS) as usize;
    }
    normalize_rms(&mut out);
    out
}

/// Pink-ish noise from a three-pole filter on white noise, unit RMS.
pub fn pink_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    normalize_rms(&mut out);
    out
}

pub fn white_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Noise with a syllabic (about 4 Hz) random amplitude envelope.
pub fn modulated_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let base = pink_noise(rng, len);
    let mut env = 0.0;
    let mut target = 0.0;
    let hold = (0.25 * FS) as usize;
    let mut out = vec![0.0; len];
    for (n, (o, b)) in out.iter_mut().zip(&base).enumerate() {
        if n % hold == 0 {
            target = if rng.gen_bool(0.7) { rng.gen_range(0.3..1.0) } else { 0.0 };
        }
        env += 0.002 * (target - env);
        *o = env * b;
    }
    normalize_rms(&mut out);
    out
}

/// Where scene sources come from.
#[derive(Clone, Debug, Default)]
pub enum SourceKind {
    #[default]
    Speech,
    ModulatedNoise,
    /// Random excerpts (looped if short) from ingested recordings.
    Recordings(Arc<Vec<Vec<f64>>>),
}

impl SourceKind {
    pub fn draw(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        match self {
            SourceKind::Speech => speech_like(rng, len),
            SourceKind::ModulatedNoise => modulated_noise(rng, len),
            SourceKind::Recordings(pool) if !pool.is_empty() => {
                let clip = &pool[rng.gen_range(0..pool.len())];
                if clip.is_empty() {
                    return vec![0.0; len];
                }
                let start = rng.gen_range(0..clip.len());
                let mut out: Vec<f64> = (0..len).map(|i| clip[(start + i) % clip.len()]).collect();
                normalize_rms(&mut out);
                out
            }
            SourceKind::Recordings(_) => speech_like(rng, len),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn speech_has_pauses_and_unit_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = speech_like(&mut rng, 5 * 16000);
        assert!(x.iter().all(|v| v.is_finite()));
        let silent = x.iter().filter(|v| v.abs() == 0.0).count();
        assert!(silent > 1600, "expected pauses, got {silent} silent samples");
        let active: Vec<f64> = x.iter().copied().filter(|v| *v != 0.0).collect();
        let p = active.iter().map(|v| v * v).sum::<f64>() / active.len() as f64;
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sources_are_deterministic() {
        let a = modulated_noise(&mut ChaCha8Rng::seed_from_u64(3), 4000);
        let b = modulated_noise(&mut ChaCha8Rng::seed_from_u64(3), 4000);
        assert_eq!(a, b);
    }
}
