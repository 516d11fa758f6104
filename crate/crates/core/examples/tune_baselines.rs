//! Grid search of the baseline hyperparameters on the tuning scenes (seeds
//! disjoint from training, validation and evaluation).
//!
//! cargo run --release -p afopt --example tune_baselines -- aec|gsc [scenes]

use afopt::adapt::StepMode;
use afopt::classic::{Kalman, Nlms, Rls};
use afopt::desk;
use afopt::train::{validation_metric, Dataset};

fn main() -> afopt::Result<()> {
    let mut args = std::env::args().skip(1);
    let task = args.next().unwrap_or_else(|| "aec".into());
    let n: u64 = args.next().map_or(64, |s| s.parse().unwrap());
    let seeds = desk::TUNE_SEEDS.start..desk::TUNE_SEEDS.start + n;
    if task == "gsc" {
        let data = desk::gsc_set(seeds);
        tune_nlms(&data)?;
        let mut best = (f64::NEG_INFINITY, Rls::default());
        for forgetting in [0.9, 0.95, 0.98, 0.99, 0.995, 0.999] {
            for regularizer in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
                let rls = Rls::new(forgetting, regularizer)?;
                let p = validation_metric(&rls, StepMode::P, &data)?;
                let pu = validation_metric(&rls, StepMode::PU, &data)?;
                println!("rls forgetting={forgetting} regularizer={regularizer}: P {p:.2} dB  PU {pu:.2} dB");
                if p > best.0 {
                    best = (p, rls);
                }
            }
        }
        println!("best rls: {:?} at {:.2} dB", best.1, best.0);
        return Ok(());
    }
    let data = desk::aec_set(seeds);
    tune_nlms(&data)?;
    let mut best = (f64::NEG_INFINITY, Kalman::default());
    for transition in [0.95, 0.98, 0.99, 0.999] {
        for process_floor in [1e-10, 1e-4, 1e-3, 1e-2] {
            for initial_covariance in [1e-2, 1e-1] {
                for noise_smoothing in [0.9, 0.99, 0.999] {
                    let kf = Kalman {
                        transition,
                        process_floor,
                        initial_covariance,
                        noise_smoothing,
                        ..Kalman::default()
                    };
                    let m = validation_metric(&kf, StepMode::P, &data)?;
                    println!("kf A={transition} q={process_floor} p0={initial_covariance} a={noise_smoothing}: {m:.2} dB");
                    if m > best.0 {
                        best = (m, kf);
                    }
                }
            }
        }
    }
    println!("best kf: {:?} at {:.2} dB", best.1, best.0);
    Ok(())
}

fn tune_nlms(data: &impl Dataset) -> afopt::Result<()> {
    let mut best = (f64::NEG_INFINITY, Nlms::default());
    for step_size in [0.1, 0.25, 0.5, 1.0, 1.5] {
        for regularizer in [1e-6, 0.1, 1.0, 10.0, 30.0, 100.0, 300.0] {
            let nlms = Nlms::new(step_size, regularizer)?;
            let m = validation_metric(&nlms, StepMode::P, data)?;
            println!("nlms step_size={step_size} regularizer={regularizer}: {m:.2} dB");
            if m > best.0 {
                best = (m, nlms);
            }
        }
    }
    println!("best nlms: {:?} at {:.2} dB", best.1, best.0);
    Ok(())
}
