#![allow(dead_code)]

use afopt::adapt::{FilterSetup, StepMode, StreamState};
use afopt::filters::SteeringVector;
use afopt::neural::{init_params, Hidden, LearnedOptimizer, NetShape};
use afopt::train::{grad_wrt_params, initial_state, segment_forward, segment_loss, Example, LossKind};
use afopt::{FrameConfig, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Direct-form convolution truncated to the length of `x`.
pub fn fir(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| h.iter().enumerate().filter(|(k, _)| *k <= n).map(|(k, c)| c * x[n - k]).sum())
        .collect()
}

pub fn tiny_cfg() -> FrameConfig {
    FrameConfig::new(16, 8).unwrap()
}

/// Echo canceller with K = 9 bins and B = 2 blocks over 12 frames.
pub fn tiny_aec(seed: u64) -> Example {
    let cfg = tiny_cfg();
    let len = 12 * cfg.hop();
    let u = noise(len, seed);
    let h: Vec<f64> = noise(12, seed + 1).iter().enumerate().map(|(i, v)| v * 0.7f64.powi(i as i32)).collect();
    let d_u = fir(&u, &h);
    let s: Vec<f64> = noise(len, seed + 2).iter().map(|v| 0.1 * v).collect();
    let d = d_u.iter().zip(&s).map(|(a, b)| a + b).collect();
    Example {
        setup: FilterSetup::aec(cfg, 2).unwrap(),
        inputs: vec![u, d],
        reference: d_u,
        near: s,
    }
}

/// Beamformer with K = 9 bins and 3 microphones over 12 frames.
pub fn tiny_gsc(seed: u64) -> Example {
    let cfg = tiny_cfg();
    let len = 12 * cfg.hop();
    let target = noise(len, seed);
    let mics: Vec<Vec<f64>> = (0..3)
        .map(|m| {
            let interf = noise(len, seed + 10 + m as u64);
            let lag = m;
            (0..len)
                .map(|i| if i >= lag { target[i - lag] } else { 0.0 } + 0.5 * interf[i])
                .collect()
        })
        .collect();
    let delays: Vec<f64> = (0..3).map(|m| m as f64 / 16_000.0).collect();
    Example {
        setup: FilterSetup::gsc(cfg, SteeringVector::from_delays(&delays, cfg)).unwrap(),
        inputs: mics,
        reference: target,
        near: Vec::new(),
    }
}

pub fn tiny_optimizer(example: &Example, hidden: usize, seed: u64) -> LearnedOptimizer {
    let shape = NetShape::new(hidden, example.setup.taps, example.setup.bins()).unwrap();
    LearnedOptimizer::new(init_params(shape, seed))
}

/// State after `warm` frames so that weights, recurrent state and overlap
/// tail all carry signal into the segment.
pub fn warm_state(opt: &LearnedOptimizer, mode: StepMode, ex: &Example, warm: usize) -> StreamState<Hidden> {
    let mut st = initial_state(opt, &ex.setup);
    segment_forward(opt, mode, ex, &mut st, 0..warm, None).unwrap();
    st
}

/// Worst relative error between reverse-mode and central-difference
/// derivatives over every real parameter coordinate.
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose derivative exceeds the comparison floor.
    pub significant: usize,
    pub max_rel: f64,
    pub worst: usize,
    /// Reverse-mode and finite-difference values at `worst`.
    pub pair: (f64, f64),
    pub scale: f64,
}

pub fn fd_check(kind: LossKind, mode: StepMode, ex: &Example, opt: &LearnedOptimizer, warm: usize, frames: usize, step: f64) -> FdReport {
    let st0 = warm_state(opt, mode, ex, warm);
    let seg = warm..warm + frames;
    let mut st = st0.clone();
    let g = grad_wrt_params(kind, opt, mode, ex, &mut st, seg.clone()).unwrap();
    assert!(g.loss.is_some());
    let params = opt.params().clone();
    let scale = g.grad.iter().map(|c| c.re.abs().max(c.im.abs())).fold(0.0, f64::max);
    let mut report = FdReport {
        checked: 0,
        significant: 0,
        max_rel: 0.0,
        worst: 0,
        pair: (0.0, 0.0),
        scale,
    };
    for i in 0..params.real_len() {
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.set_real(i, p.real(i) + delta);
            let o = LearnedOptimizer::new(p);
            let mut s = st0.clone();
            segment_loss(kind, &o, mode, ex, &mut s, seg.clone()).unwrap().unwrap()
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        let c: C64 = g.grad[i / 2];
        let an = if i % 2 == 0 { c.re } else { c.im };
        // relative to the larger of the two; derivatives below 1e-5 of the
        // largest one sit near the rounding noise of the central difference
        // (about 1e-11 here) and are compared against that floor instead
        let floor = 1e-5 * scale;
        if an.abs().max(fd.abs()) >= floor {
            report.significant += 1;
        }
        let denom = an.abs().max(fd.abs()).max(floor).max(1e-12);
        let rel = (an - fd).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = i;
            report.pair = (an, fd);
        }
    }
    report
}
