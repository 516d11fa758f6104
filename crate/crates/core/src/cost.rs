//! Analytic FLOP counts and measured real-time factors.
//!
//! Conventions: a length-`N` transform costs `5 N log2 N` flops, a complex
//! multiply-add 8 flops. Every filter pass is counted, including the extra
//! pass of the final update. Counts are per frame of `R` new samples.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{FilterSetup, StepMode, Stream, Task};
use crate::error::{Error, Result};
use crate::neural::{step_macs, NetShape};
use crate::signal::SAMPLE_RATE;
use crate::update::UpdateRule;

const CMAC: f64 = 8.0;

/// Optimizer whose cost is being counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostModel {
    Null,
    Nlms,
    Kalman,
    Rls,
    Learned { hidden: usize },
}

pub fn fft_flops(n: usize) -> f64 {
    5.0 * n as f64 * (n as f64).log2()
}

/// Per-frame cost broken down by pipeline stage (flops).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub input: f64,
    pub filter: f64,
    pub optimizer: f64,
    pub synthesis: f64,
}

impl FlopBreakdown {
    pub fn total(&self) -> f64 {
        self.input + self.filter + self.optimizer + self.synthesis
    }

    pub fn mflops(&self) -> f64 {
        self.total() / 1e6
    }
}

/// Optimizer step cost in flops.
pub fn optimizer_flops(model: CostModel, taps: usize, bins: usize) -> f64 {
    let (t, k) = (taps as f64, bins as f64);
    match model {
        CostModel::Null => 0.0,
        // input power (3), conj(U) e (6), scaling (2), plus one division per bin
        CostModel::Nlms => t * k * 11.0 + k,
        // predict 5, denominator 4, gain 3, update 6, correct 8, noise 4
        CostModel::Kalman => t * k * 26.0 + 8.0 * k,
        // Phi^-1 z, z^H pi, the rank-one downdate and the Hermitian symmetrization
        CostModel::Rls => k * (3.0 * CMAC * t * t + 2.0 * CMAC * t + 6.0 * t),
        CostModel::Learned { hidden } => {
            let shape = NetShape {
                hidden,
                taps,
                bins,
            };
            let macs = step_macs(shape) as f64 * CMAC;
            // asinh encoding of every feature (about 10 flops per real value)
            let encode = 20.0 * shape.features_per_bin() as f64 * k;
            // gates, candidate and state mix per hidden unit and layer
            let pointwise = 2.0 * 60.0 * (hidden * shape.bands()) as f64;
            // normalized direction and gain: power 3, scaling 2, two products 12
            let output = 17.0 * t * k;
            macs + encode + pointwise + output
        }
    }
}

/// Analytic cost of one frame.
pub fn count_flops(setup: &FilterSetup, model: CostModel, mode: StepMode) -> FlopBreakdown {
    let n = setup.cfg.fft_len();
    let k = setup.bins() as f64;
    let t = setup.taps as f64;
    let m = (n / setup.cfg.hop()) as f64;
    let (input, pass) = match setup.task {
        // far-end transform; per pass: one inverse per sub-block, the error
        // transform, the sub-block products and the subtraction from d
        Task::Aec => (
            fft_flops(n),
            m * fft_flops(n) + fft_flops(n) + m * t * k * CMAC + n as f64,
        ),
        // microphone transforms and fixed/blocking projections; per pass the
        // adaptive branch and the inverse transform of the output
        Task::Gsc => (
            t * fft_flops(n) + 2.0 * t * k * CMAC,
            t * k * CMAC + 2.0 * k + fft_flops(n),
        ),
    };
    let c = mode.predict_iters as f64;
    FlopBreakdown {
        input,
        filter: pass * mode.passes() as f64,
        optimizer: c * (optimizer_flops(model, setup.taps, setup.bins()) + 2.0 * t * k),
        synthesis: 2.0 * n as f64,
    }
}

/// Cost summary of one configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mflops_per_frame: f64,
    pub rtf: f64,
    pub params: usize,
}

/// Median real-time factor over `runs` timed passes of the whole signal,
/// after one untimed warm-up pass. Runs on the calling thread only.
pub fn measure_rtf<O: UpdateRule>(
    setup: &FilterSetup,
    optimizer: &O,
    mode: StepMode,
    signals: &[&[f64]],
    runs: usize,
) -> Result<f64> {
    let len = signals.first().map_or(0, |s| s.len());
    if len == 0 {
        return Err(Error::Degenerate("cannot time an empty signal".into()));
    }
    let runs = runs.max(5);
    let mut times = Vec::with_capacity(runs);
    for i in 0..=runs {
        let mut stream = Stream::new(setup.clone(), optimizer, mode);
        let start = Instant::now();
        let out = stream.run(signals)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(&out);
        if i > 0 {
            times.push(elapsed);
        }
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Ok(median / (len as f64 / SAMPLE_RATE as f64))
}

/// A short description of the CPU the process runs on.
pub fn cpu_identifier() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}
