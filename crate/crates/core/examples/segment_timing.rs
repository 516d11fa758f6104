//! Times forward and forward+backward passes of a learned optimizer on one
//! generated echo-cancellation scene.
//!
//! cargo run --release -p afopt --example segment_timing -- [S|M|L] [mode]

use std::time::Instant;

use afopt::adapt::StepMode;
use afopt::neural::{init_params, LearnedOptimizer, ModelSize, NetShape};
use afopt::scenes::{gen_aec_scene, AecSceneRanges, SourceKind};
use afopt::train::{grad_wrt_params, initial_state, segment_forward, Example, LossKind};
use afopt::FrameConfig;

fn main() -> afopt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let size: ModelSize = args.get(1).map_or(Ok(ModelSize::S), |s| s.parse())?;
    let mode: StepMode = args.get(2).map_or(Ok(StepMode::PU), |s| s.parse())?;
    let cfg = FrameConfig::default();
    let ranges = AecSceneRanges {
        duration: 4.0,
        ..AecSceneRanges::default()
    };
    let t = Instant::now();
    let scene = gen_aec_scene(1, &ranges.draw(1), &SourceKind::Speech)?;
    println!("scene generation: {:.3} s", t.elapsed().as_secs_f64());
    let ex = Example::aec(&scene, cfg, 8)?;
    let shape = NetShape::for_size(size, 8, cfg.bins())?;
    let opt = LearnedOptimizer::new(init_params(shape, 0));
    let frames = ex.frames();

    let mut st = initial_state(&opt, &ex.setup);
    let t = Instant::now();
    segment_forward(&opt, mode, &ex, &mut st, 0..frames, None)?;
    let fwd = t.elapsed().as_secs_f64();
    println!("forward: {frames} frames in {fwd:.3} s ({:.2} ms/frame)", 1e3 * fwd / frames as f64);

    let mut st = initial_state(&opt, &ex.setup);
    let t = Instant::now();
    let mut pos = 0;
    while pos < frames {
        let end = (pos + 64).min(frames);
        grad_wrt_params(LossKind::SupEchoLogMse, &opt, mode, &ex, &mut st, pos..end)?;
        pos = end;
    }
    let bwd = t.elapsed().as_secs_f64();
    println!("forward+backward: {bwd:.3} s ({:.2} ms/frame)", 1e3 * bwd / frames as f64);
    Ok(())
}
