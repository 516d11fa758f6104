//! Desk-scale experiment recipe: disjoint seed ranges for training,
//! validation, evaluation and baseline tuning, and the training settings
//! used to reproduce the scaling trends on a single CPU.

use std::ops::Range;

use crate::scenes::{AecSceneRanges, GscSceneRanges, SourceKind};
use crate::signal::FrameConfig;
use crate::train::{SyntheticAec, SyntheticGsc, TrainConfig};

pub const TRAIN_SEEDS: Range<u64> = 0..2000;
pub const VAL_SEEDS: Range<u64> = 1_000_000..1_000_040;
pub const EVAL_SEEDS: Range<u64> = 2_000_000..2_000_200;
/// Seeds the baseline hyperparameters were grid-searched on.
pub const TUNE_SEEDS: Range<u64> = 5_000_000..5_000_064;

/// Echo-canceller blocks.
pub const BLOCKS: usize = 8;

pub fn aec_set(seeds: Range<u64>) -> SyntheticAec {
    SyntheticAec {
        seeds: seeds.collect(),
        ranges: AecSceneRanges::default(),
        source: SourceKind::Speech,
        frames: FrameConfig::default(),
        blocks: BLOCKS,
    }
}

pub fn gsc_set(seeds: Range<u64>) -> SyntheticGsc {
    SyntheticGsc {
        seeds: seeds.collect(),
        ranges: GscSceneRanges::default(),
        source: SourceKind::Speech,
        frames: FrameConfig::default(),
    }
}

/// Training settings of the desk recipe: a larger step than the default,
/// 200 scenes per epoch so that validation runs often, and a wall-clock
/// budget in place of early stopping.
pub fn train_config(budget_s: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        epoch_scenes: 200,
        max_epochs: 1000,
        time_budget_s: budget_s,
        seed,
        ..TrainConfig::default()
    }
}
