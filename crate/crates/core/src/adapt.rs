//! Frame-by-frame adaptation with multi-step predict/update execution.
//!
//! Every frame runs `C` predict iterations of
//! `{filter pass -> optimizer -> theta += Delta}`. With a final update the
//! filter is run once more on the same frame with the freshest weights and
//! that output is synthesized; otherwise the output of the last predict pass
//! is used.

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classic::{Kalman, KalmanState, Nlms, Rls, RlsState};
use crate::error::{check_len, Error, Result};
use crate::filters::{
    aec_pass, aec_pass_adjoint, gsc_decompose, gsc_error, gsc_error_adjoint, AecScratch,
    MdfInputBuffer, SteeringVector,
};
use crate::neural::{Hidden, LearnedOptimizer};
use crate::signal::{Dft, FrameConfig, OlaSynth, StreamBuffer, C64};
use crate::update::{FilterKind, NullUpdate, UpdateInput, UpdateRule};

/// Which filtering problem a stream solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Echo cancellation with a multi-delay filter.
    Aec,
    /// Beamforming with a generalized sidelobe canceller.
    Gsc,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Aec => "aec",
            Task::Gsc => "gsc",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aec" => Ok(Task::Aec),
            "gsc" => Ok(Task::Gsc),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Predict iterations per frame and whether a final update pass follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepMode {
    pub predict_iters: usize,
    pub final_update: bool,
}

impl StepMode {
    pub const P: StepMode = StepMode {
        predict_iters: 1,
        final_update: false,
    };
    pub const PU: StepMode = StepMode {
        predict_iters: 1,
        final_update: true,
    };

    /// `C` predict iterations followed by an update pass.
    pub fn pux(iters: usize) -> Result<Self> {
        Self::new(iters, true)
    }

    pub fn new(predict_iters: usize, final_update: bool) -> Result<Self> {
        if predict_iters == 0 {
            return Err(Error::Config("at least one predict iteration is required".into()));
        }
        Ok(Self {
            predict_iters,
            final_update,
        })
    }

    /// Filter passes per frame.
    pub fn passes(&self) -> usize {
        self.predict_iters + self.final_update as usize
    }
}

impl fmt::Display for StepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.predict_iters, self.final_update) {
            (1, false) => f.write_str("P"),
            (1, true) => f.write_str("PU"),
            (c, true) => write!(f, "PUx{c}"),
            (c, false) => write!(f, "Px{c}"),
        }
    }
}

impl FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unknown step mode {s:?}"));
        let (head, iters) = match s.split_once(['x', 'X']) {
            Some((h, c)) => (h, c.parse::<usize>().map_err(|_| bad())?),
            None => (s, 1),
        };
        match head.to_ascii_uppercase().as_str() {
            "P" => Self::new(iters, false),
            "PU" => Self::new(iters, true),
            _ => Err(bad()),
        }
    }
}

/// Static description of the filter a stream adapts.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSetup {
    pub task: Task,
    pub cfg: FrameConfig,
    /// Blocks `B` (echo canceller) or microphones `M` (beamformer).
    pub taps: usize,
    pub steering: Option<SteeringVector>,
}

impl FilterSetup {
    pub fn aec(cfg: FrameConfig, blocks: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("filter needs at least one block".into()));
        }
        Ok(Self {
            task: Task::Aec,
            cfg,
            taps: blocks,
            steering: None,
        })
    }

    pub fn gsc(cfg: FrameConfig, steering: SteeringVector) -> Result<Self> {
        if steering.bins() != cfg.bins() {
            return Err(Error::Shape(format!(
                "steering vector has {} bins, frames have {}",
                steering.bins(),
                cfg.bins()
            )));
        }
        Ok(Self {
            task: Task::Gsc,
            cfg,
            taps: steering.mics(),
            steering: Some(steering),
        })
    }

    pub fn kind(&self) -> FilterKind {
        match self.task {
            Task::Aec => FilterKind::Mdf,
            Task::Gsc => FilterKind::Gsc,
        }
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    /// Input channels consumed per frame: far end and mixture, or the mics.
    pub fn channels(&self) -> usize {
        match self.task {
            Task::Aec => 2,
            Task::Gsc => self.taps,
        }
    }

    /// Far-end spectra kept in the delay line.
    pub fn history_depth(&self) -> usize {
        self.taps + self.cfg.fft_len() / self.cfg.hop() - 1
    }

    pub fn weights_len(&self) -> usize {
        self.taps * self.bins()
    }
}

/// Transform plans and scratch buffers; never part of the serialized state.
#[derive(Clone, Debug)]
pub struct Dsp {
    pub dft: Dft,
    scratch: AecScratch,
    spec: Vec<C64>,
}

impl Dsp {
    pub fn new(cfg: FrameConfig) -> Self {
        Self {
            dft: Dft::new(cfg),
            scratch: AecScratch::new(cfg.fft_len()),
            spec: vec![C64::default(); cfg.bins()],
        }
    }
}

/// Filter inputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameData {
    Aec {
        /// Far-end spectra, newest first, `history_depth x K`.
        history: Vec<C64>,
        /// Current `N`-sample mixture frame.
        d_frame: Vec<f64>,
    },
    Gsc {
        fixed: Vec<C64>,
        blocked: Vec<C64>,
    },
}

impl FrameData {
    /// Filter input seen by the optimizer, `[taps x K]`.
    pub fn regressor(&self, setup: &FilterSetup) -> &[C64] {
        match self {
            FrameData::Aec { history, .. } => &history[..setup.weights_len()],
            FrameData::Gsc { blocked, .. } => blocked,
        }
    }

    /// One filter pass: the full-frame error and its spectrum.
    pub fn pass(&self, setup: &FilterSetup, theta: &[C64], dsp: &mut Dsp, e_frame: &mut [f64], e_spec: &mut [C64]) -> Result<()> {
        match self {
            FrameData::Aec { history, d_frame } => aec_pass(
                theta,
                setup.taps,
                history,
                d_frame,
                setup.cfg.hop(),
                &mut dsp.dft,
                &mut dsp.scratch,
                e_frame,
                e_spec,
            ),
            FrameData::Gsc { fixed, blocked } => {
                gsc_error(theta, fixed, blocked, e_spec)?;
                dsp.dft.inverse_real_part(e_spec, e_frame)
            }
        }
    }

    /// Accumulates into `g_theta` the gradient of a loss reaching the outputs
    /// of [`FrameData::pass`] through `g_e_frame` and `g_e_spec`.
    pub fn pass_adjoint(&self, setup: &FilterSetup, g_e_frame: &[f64], g_e_spec: Option<&[C64]>, dsp: &mut Dsp, g_theta: &mut [C64]) -> Result<()> {
        match self {
            FrameData::Aec { history, .. } => aec_pass_adjoint(
                setup.taps,
                history,
                setup.cfg.hop(),
                g_e_frame,
                g_e_spec,
                &mut dsp.dft,
                &mut dsp.scratch,
                g_theta,
            ),
            FrameData::Gsc { blocked, .. } => {
                dsp.dft.inverse_adjoint(g_e_frame, &mut dsp.spec)?;
                if let Some(g) = g_e_spec {
                    for (a, b) in dsp.spec.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                gsc_error_adjoint(blocked, &dsp.spec, g_theta)
            }
        }
    }
}

/// Input buffering for one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontEnd {
    inputs: Vec<StreamBuffer>,
    history: Option<MdfInputBuffer>,
}

impl FrontEnd {
    pub fn new(setup: &FilterSetup) -> Self {
        let history = match setup.task {
            Task::Aec => Some(MdfInputBuffer::new(setup.history_depth(), setup.bins())),
            Task::Gsc => None,
        };
        Self {
            inputs: (0..setup.channels()).map(|_| StreamBuffer::new(setup.cfg)).collect(),
            history,
        }
    }

    /// Consumes one hop of every input channel and returns the frame data.
    pub fn push(&mut self, setup: &FilterSetup, blocks: &[&[f64]], dsp: &mut Dsp) -> Result<FrameData> {
        if blocks.len() != self.inputs.len() {
            return Err(Error::Shape(format!(
                "{} input channels, expected {}",
                blocks.len(),
                self.inputs.len()
            )));
        }
        for b in blocks {
            check_len(setup.cfg.hop(), b.len())?;
        }
        match setup.task {
            Task::Aec => {
                let far = self.inputs[0].push(blocks[0])?;
                dsp.dft.forward(far, &mut dsp.spec)?;
                let history = self.history.as_mut().expect("echo canceller keeps a delay line");
                history.push(&dsp.spec)?;
                let d_frame = self.inputs[1].push(blocks[1])?.to_vec();
                Ok(FrameData::Aec {
                    history: history.spectra().to_vec(),
                    d_frame,
                })
            }
            Task::Gsc => {
                let k = setup.bins();
                let mut u = vec![C64::default(); setup.taps * k];
                for (m, b) in blocks.iter().enumerate() {
                    let frame = self.inputs[m].push(b)?;
                    dsp.dft.forward(frame, &mut u[m * k..(m + 1) * k])?;
                }
                let steering = setup.steering.as_ref().expect("beamformer has a steering vector");
                let (fixed, blocked) = gsc_decompose(steering, &u)?;
                Ok(FrameData::Gsc { fixed, blocked })
            }
        }
    }
}

/// Everything that carries over from one frame to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Serialize + DeserializeOwned")]
pub struct StreamState<S> {
    /// Filter weights `[taps x K]`.
    pub theta: Vec<C64>,
    /// Optimizer state.
    pub opt: S,
    pub front: FrontEnd,
    pub ola: OlaSynth,
    /// Frames processed so far.
    pub frame: u64,
}

impl<S: Serialize + DeserializeOwned> StreamState<S> {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// A single adaptive stream driven by an optimizer.
#[derive(Debug)]
pub struct Stream<'a, O: UpdateRule> {
    setup: FilterSetup,
    optimizer: &'a O,
    mode: StepMode,
    state: StreamState<O::State>,
    dsp: Dsp,
    e_frame: Vec<f64>,
    e_spec: Vec<C64>,
    delta: Vec<C64>,
}

fn all_finite(v: &[C64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

impl<'a, O: UpdateRule> Stream<'a, O> {
    pub fn new(setup: FilterSetup, optimizer: &'a O, mode: StepMode) -> Self {
        let state = StreamState {
            theta: vec![C64::default(); setup.weights_len()],
            opt: optimizer.init_state(setup.taps, setup.bins()),
            front: FrontEnd::new(&setup),
            ola: OlaSynth::new(setup.cfg),
            frame: 0,
        };
        Self::with_state(setup, optimizer, mode, state)
    }

    /// Resumes from a previously captured state.
    pub fn with_state(setup: FilterSetup, optimizer: &'a O, mode: StepMode, state: StreamState<O::State>) -> Self {
        let cfg = setup.cfg;
        Self {
            dsp: Dsp::new(cfg),
            e_frame: vec![0.0; cfg.fft_len()],
            e_spec: vec![C64::default(); cfg.bins()],
            delta: vec![C64::default(); setup.weights_len()],
            setup,
            optimizer,
            mode,
            state,
        }
    }

    pub fn setup(&self) -> &FilterSetup {
        &self.setup
    }

    pub fn mode(&self) -> StepMode {
        self.mode
    }

    pub fn state(&self) -> &StreamState<O::State> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut StreamState<O::State> {
        &mut self.state
    }

    pub fn into_state(self) -> StreamState<O::State> {
        self.state
    }

    /// Processes one hop of every input channel (`[far end, mixture]` or the
    /// microphones) and writes `R` output samples. On failure the stream is
    /// left exactly as it was before the call.
    pub fn process_frame(&mut self, blocks: &[&[f64]], out: &mut [f64]) -> Result<()> {
        check_len(self.setup.cfg.hop(), out.len())?;
        let backup = self.state.clone();
        let frame = self.state.frame;
        match self.try_frame(blocks, out) {
            Ok(()) => Ok(()),
            Err(err) => {
                self.state = backup;
                Err(match err {
                    Error::NonFinite { what, .. } => {
                        log::warn!("frame {frame} rejected: non-finite {what}");
                        Error::NonFinite { what, frame }
                    }
                    other => other,
                })
            }
        }
    }

    fn try_frame(&mut self, blocks: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let setup = &self.setup;
        let st = &mut self.state;
        let data = st.front.push(setup, blocks, &mut self.dsp)?;
        for _ in 0..self.mode.predict_iters {
            data.pass(setup, &st.theta, &mut self.dsp, &mut self.e_frame, &mut self.e_spec)?;
            let input = UpdateInput {
                kind: setup.kind(),
                taps: setup.taps,
                bins: setup.bins(),
                input: data.regressor(setup),
                error: &self.e_spec,
                theta: &st.theta,
            };
            self.optimizer.step(&mut st.opt, &input, &mut self.delta)?;
            if !all_finite(&self.delta) {
                return Err(Error::NonFinite {
                    what: "filter update".into(),
                    frame: st.frame,
                });
            }
            for (t, d) in st.theta.iter_mut().zip(&self.delta) {
                *t += d;
            }
        }
        if self.mode.final_update {
            data.pass(setup, &st.theta, &mut self.dsp, &mut self.e_frame, &mut self.e_spec)?;
        }
        if !self.e_frame.iter().all(|x| x.is_finite()) || !all_finite(&st.theta) {
            return Err(Error::NonFinite {
                what: "filter output".into(),
                frame: st.frame,
            });
        }
        st.ola.synthesize(&self.e_frame, out)?;
        st.frame += 1;
        Ok(())
    }

    /// Streams whole signals, zero-padding the last hop. The output has the
    /// length of the inputs and lags them by [`FrameConfig::latency`].
    pub fn run(&mut self, signals: &[&[f64]]) -> Result<Vec<f64>> {
        let len = signals.first().map_or(0, |s| s.len());
        if signals.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("input signals differ in length".into()));
        }
        let hop = self.setup.cfg.hop();
        let frames = len.div_ceil(hop);
        let mut out = vec![0.0; frames * hop];
        let mut padded: Vec<Vec<f64>> = vec![vec![0.0; hop]; signals.len()];
        for f in 0..frames {
            let lo = f * hop;
            let hi = (lo + hop).min(len);
            for (p, s) in padded.iter_mut().zip(signals) {
                p[..hi - lo].copy_from_slice(&s[lo..hi]);
                p[hi - lo..].iter_mut().for_each(|x| *x = 0.0);
            }
            let views: Vec<&[f64]> = padded.iter().map(Vec::as_slice).collect();
            self.process_frame(&views, &mut out[lo..lo + hop])?;
        }
        out.truncate(len);
        Ok(out)
    }
}

/// Runs a fresh stream over whole signals and returns the output together
/// with the final state.
pub fn run_sequence<O: UpdateRule>(
    setup: &FilterSetup,
    optimizer: &O,
    mode: StepMode,
    signals: &[&[f64]],
) -> Result<(Vec<f64>, StreamState<O::State>)> {
    let mut stream = Stream::new(setup.clone(), optimizer, mode);
    let out = stream.run(signals)?;
    Ok((out, stream.into_state()))
}

/// Removes the pipeline latency: `aligned[n] = output[n + latency]`, padded
/// with zeros at the end.
pub fn align_output(output: &[f64], latency: usize) -> Vec<f64> {
    let mut v: Vec<f64> = output.iter().skip(latency).copied().collect();
    v.resize(output.len(), 0.0);
    v
}

/// Any optimizer the command-line tools can drive.
#[derive(Clone, Debug)]
pub enum AnyOptimizer {
    Null,
    Nlms(Nlms),
    Kalman(Kalman),
    Rls(Rls),
    Learned(LearnedOptimizer),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnyState {
    Stateless,
    Kalman(KalmanState),
    Rls(RlsState),
    Learned(Hidden),
}

impl UpdateRule for AnyOptimizer {
    type State = AnyState;

    fn init_state(&self, taps: usize, bins: usize) -> AnyState {
        match self {
            AnyOptimizer::Null | AnyOptimizer::Nlms(_) => AnyState::Stateless,
            AnyOptimizer::Kalman(k) => AnyState::Kalman(k.init_state(taps, bins)),
            AnyOptimizer::Rls(r) => AnyState::Rls(r.init_state(taps, bins)),
            AnyOptimizer::Learned(l) => AnyState::Learned(l.init_state(taps, bins)),
        }
    }

    fn step(&self, state: &mut AnyState, input: &UpdateInput<'_>, delta: &mut [C64]) -> Result<()> {
        match (self, state) {
            (AnyOptimizer::Null, _) => NullUpdate.step(&mut (), input, delta),
            (AnyOptimizer::Nlms(n), _) => n.step(&mut (), input, delta),
            (AnyOptimizer::Kalman(k), AnyState::Kalman(s)) => k.step(s, input, delta),
            (AnyOptimizer::Rls(r), AnyState::Rls(s)) => r.step(s, input, delta),
            (AnyOptimizer::Learned(l), AnyState::Learned(s)) => l.step(s, input, delta),
            _ => Err(Error::Config("optimizer state does not belong to this optimizer".into())),
        }
    }
}
