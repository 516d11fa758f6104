//! Desk-scale training run compared with the classical baselines on the
//! validation scenes.
//!
//! cargo run --release -p afopt --example desk -- key=value ...
//! keys: task (aec|gsc), size, loss, mode, train, val, lr, epochs,
//! epoch_scenes, budget, batch, seed, ckpt (output path)

use std::collections::BTreeMap;
use std::time::Instant;

use afopt::adapt::{StepMode, Task};
use afopt::classic::{Kalman, Nlms, Rls};
use afopt::desk;
use afopt::neural::{init_params, save_checkpoint, ModelSize, NetShape};
use afopt::train::{train_loop, validation_metric, Dataset, LossKind};

fn main() -> afopt::Result<()> {
    let kv: BTreeMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| kv.get(k).cloned().unwrap_or_else(|| d.to_string());
    let task: Task = get("task", "aec").parse()?;
    let size: ModelSize = get("size", "S").parse()?;
    let mode: StepMode = get("mode", "PU").parse()?;
    let loss = match get("loss", "S").parse()? {
        LossKind::UnsupEcho => LossKind::UnsupEcho,
        _ => LossKind::supervised(task),
    };
    let n_train: u64 = get("train", "2000").parse().unwrap();
    let n_val: u64 = get("val", "40").parse().unwrap();
    let seed: u64 = get("seed", "0").parse().unwrap();
    let mut tc = desk::train_config(get("budget", "600").parse().unwrap(), seed);
    tc.lr = get("lr", &tc.lr.to_string()).parse().unwrap();
    tc.max_epochs = get("epochs", &tc.max_epochs.to_string()).parse().unwrap();
    tc.epoch_scenes = get("epoch_scenes", &tc.epoch_scenes.to_string()).parse().unwrap();
    tc.batch = get("batch", &tc.batch.to_string()).parse().unwrap();
    let (t0, v0) = (desk::TRAIN_SEEDS.start, desk::VAL_SEEDS.start);
    match task {
        Task::Aec => {
            let train = desk::aec_set(t0..t0 + n_train);
            let val = desk::aec_set(v0..v0 + n_val);
            println!("nlms.P {:.2} dB", validation_metric(&Nlms::default(), StepMode::P, &val)?);
            println!("kf.P {:.2} dB", validation_metric(&Kalman::default(), StepMode::P, &val)?);
            println!("kf.PU {:.2} dB", validation_metric(&Kalman::default(), StepMode::PU, &val)?);
            run(&train, &val, size, mode, loss, &tc, &get("ckpt", ""))
        }
        Task::Gsc => {
            let train = desk::gsc_set(t0..t0 + n_train);
            let val = desk::gsc_set(v0..v0 + n_val);
            println!("nlms.P {:.2} dB", validation_metric(&Nlms::beamformer(), StepMode::P, &val)?);
            println!("rls.P {:.2} dB", validation_metric(&Rls::default(), StepMode::P, &val)?);
            println!("rls.PU {:.2} dB", validation_metric(&Rls::default(), StepMode::PU, &val)?);
            run(&train, &val, size, mode, loss, &tc, &get("ckpt", ""))
        }
    }
}

fn run(
    train: &impl Dataset,
    val: &impl Dataset,
    size: ModelSize,
    mode: StepMode,
    loss: LossKind,
    tc: &afopt::train::TrainConfig,
    ckpt: &str,
) -> afopt::Result<()> {
    let setup = val.example(0)?.setup;
    let shape = NetShape::for_size(size, setup.taps, setup.bins())?;
    let t = Instant::now();
    let report = train_loop(train, val, init_params(shape, tc.seed), mode, loss, tc, None, |p, m| {
        println!("  best {m:.2} dB at {:.0} s", t.elapsed().as_secs_f64());
        if !ckpt.is_empty() {
            save_checkpoint(ckpt, Some(size), p)?;
        }
        Ok(())
    })?;
    for r in report.log.iter().filter(|r| r.val_metric.is_some()) {
        println!("epoch {} step {} loss {:.3} val {:.2} lr {:.1e} gn {:.2}", r.epoch, r.step, r.loss, r.val_metric.unwrap(), r.lr, r.grad_norm);
    }
    println!(
        "{size}.{}.{mode}: best {:.2} dB (epoch {}), stop {:?}, {} steps, {:.0} s",
        loss.tag(),
        report.best_metric,
        report.best_epoch,
        report.stop,
        report.steps,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
