//! The interface between a filter and whatever computes its parameter updates.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;
use crate::signal::C64;

/// Filter structure an update drives.
///
/// The MDF filter computes `e = d - sum_t theta_t x_t`, the GSC computes
/// `e = y_fb - sum_t conj(theta_t) z_t`; gradient-style rules conjugate their
/// output accordingly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Mdf,
    Gsc,
}

/// Everything an optimizer may look at for one update of one frame.
#[derive(Clone, Copy, Debug)]
pub struct UpdateInput<'a> {
    pub kind: FilterKind,
    pub taps: usize,
    pub bins: usize,
    /// Filter input `[taps x K]`: far-end delay line (MDF) or blocked
    /// channels (GSC).
    pub input: &'a [C64],
    /// Error spectrum `[K]` produced with the current weights.
    pub error: &'a [C64],
    /// Current weights `[taps x K]`.
    pub theta: &'a [C64],
}

/// An optimizer `g` producing `Delta` such that `theta <- theta + Delta`.
pub trait UpdateRule {
    type State: Clone + Send + std::fmt::Debug + Serialize + DeserializeOwned;

    fn init_state(&self, taps: usize, bins: usize) -> Self::State;

    /// Writes the update into `delta` (`[taps x K]`) and advances `state`.
    fn step(&self, state: &mut Self::State, input: &UpdateInput<'_>, delta: &mut [C64])
        -> Result<()>;
}

/// Never moves the filter.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullUpdate;

impl UpdateRule for NullUpdate {
    type State = ();

    fn init_state(&self, _taps: usize, _bins: usize) {}

    fn step(&self, _: &mut (), _: &UpdateInput<'_>, delta: &mut [C64]) -> Result<()> {
        delta.iter_mut().for_each(|d| *d = C64::default());
        Ok(())
    }
}
