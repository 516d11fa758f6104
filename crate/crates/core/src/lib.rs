//! Streaming frequency-domain adaptive filters with classical and learned
//! multi-step optimizers.

pub mod adapt;
pub mod classic;
pub mod config;
pub mod cost;
pub mod desk;
pub mod error;
pub mod filters;
pub mod metrics;
pub mod neural;
pub mod scenes;
pub mod signal;
pub mod train;
pub mod update;

pub use error::{Error, Result};
pub use signal::{FrameConfig, C64};
