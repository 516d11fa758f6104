//! The guide under `book/` is plain mdbook, which cannot run listings that
//! depend on workspace crates. Each chapter is included here as the docs of
//! an empty module instead, so `cargo test --doc` checks every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}
#[doc = include_str!("../../../book/src/optimizers.md")]
pub mod optimizers {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
