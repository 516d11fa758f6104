//! Losses, reverse-mode gradients through whole adaptive-filter segments, and
//! the truncated-BPTT training loop.
//!
//! A segment runs `L` frames of the stream with a recorded tape. The loss is
//! evaluated on the concatenated synthesized output; its gradient is pushed
//! back through overlap-add, every filter pass, every optimizer step and the
//! recurrent state, frame by frame in reverse. The state entering a segment
//! is a constant.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapt::{Dsp, FilterSetup, FrameData, FrontEnd, StepMode, Stream, StreamState, Task};
use crate::error::{check_len, Error, Result};
use crate::metrics;
use crate::neural::{Hidden, LearnedOptimizer, OptimizerParams, StepCache};
use crate::scenes::{
    gen_aec_scene, gen_gsc_scene, read_scene_dir, AecScene, AecSceneRanges, GscScene, GscSceneRanges, Scene,
    SourceKind,
};
use crate::signal::{FrameConfig, OlaSynth, C64};
use crate::update::{UpdateInput, UpdateRule};

/// Floor inside every log loss.
pub const EPS_LOSS: f64 = 1e-12;

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Log mean power of the output; needs no ground truth.
    UnsupEcho,
    /// Log mean squared error between the echo estimate and the true echo.
    SupEchoLogMse,
    /// Negative SI-SDR of the output against the target.
    NegSiSdr,
}

impl LossKind {
    /// `'U'` for the unsupervised loss, `'S'` for the supervised ones.
    pub fn tag(self) -> char {
        match self {
            LossKind::UnsupEcho => 'U',
            LossKind::SupEchoLogMse | LossKind::NegSiSdr => 'S',
        }
    }

    /// The supervised loss of a task.
    pub fn supervised(task: Task) -> Self {
        match task {
            Task::Aec => LossKind::SupEchoLogMse,
            Task::Gsc => LossKind::NegSiSdr,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::UnsupEcho => "unsup",
            LossKind::SupEchoLogMse => "sup",
            LossKind::NegSiSdr => "sisdr",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unsup" | "u" | "unsupervised" => Ok(LossKind::UnsupEcho),
            "sup" | "s" | "supervised" | "logmse" => Ok(LossKind::SupEchoLogMse),
            "sisdr" | "si-sdr" | "neg-sisdr" => Ok(LossKind::NegSiSdr),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

fn mean_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `ln(mean(e^2) + EPS_LOSS)`.
pub fn loss_unsup(e: &[f64]) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::Degenerate("empty loss segment".into()));
    }
    Ok((mean_sq(e) + EPS_LOSS).ln())
}

/// `ln(mean((d_u - e)^2) + EPS_LOSS)`.
pub fn loss_sup_echo(d_u: &[f64], e: &[f64]) -> Result<f64> {
    check_len(d_u.len(), e.len())?;
    let r: Vec<f64> = d_u.iter().zip(e).map(|(a, b)| a - b).collect();
    loss_unsup(&r)
}

/// Negative SI-SDR in dB, clamped to `[-100, 100]`.
pub fn loss_neg_si_sdr(s: &[f64], e: &[f64]) -> Result<f64> {
    Ok(-metrics::si_sdr(s, e)?)
}

/// Log mean power and its gradient.
fn log_power_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let p = mean_sq(x) + EPS_LOSS;
    let scale = 2.0 / (x.len() as f64 * p);
    (p.ln(), x.iter().map(|v| v * scale).collect())
}

/// Negative SI-SDR and its gradient with respect to `e`; zero gradient where
/// the metric is clamped.
fn neg_si_sdr_grad(s: &[f64], e: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = loss_neg_si_sdr(s, e)?;
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let p: f64 = s.iter().zip(e).map(|(a, b)| a * b).sum();
    let resid = ss * ee - p * p;
    if value.abs() >= metrics::CAP_DB || p == 0.0 || resid <= 0.0 {
        return Ok((value, vec![0.0; e.len()]));
    }
    // -SI-SDR = -(10 / ln 10) (ln p^2 - ln(ss ee - p^2))
    let c = -10.0 / std::f64::consts::LN_10;
    let g = e
        .iter()
        .zip(s)
        .map(|(&ev, &sv)| c * (2.0 * sv / p - (2.0 * ss * ev - 2.0 * p * sv) / resid))
        .collect();
    Ok((value, g))
}

/// Hyper-parameters of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Truncation length `L` is drawn uniformly from `[min_trunc, max_trunc]`
    /// frames for every segment.
    pub min_trunc: usize,
    pub max_trunc: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
    /// Epochs without validation improvement before training stops.
    pub stop_after: usize,
    pub max_epochs: usize,
    /// Wall-clock limit in seconds; 0 means none.
    pub time_budget_s: f64,
    /// Training scenes visited per epoch; 0 means the whole set.
    pub epoch_scenes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            lr: 1e-4,
            min_trunc: 8,
            max_trunc: 128,
            clip: 5.0,
            patience: 10,
            stop_after: 30,
            max_epochs: 1000,
            time_budget_s: 0.0,
            epoch_scenes: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch == 0 {
            return bad("train.batch must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be a finite non-negative number");
        }
        if self.min_trunc == 0 || self.min_trunc > self.max_trunc {
            return bad("truncation range must satisfy 1 <= min_trunc <= max_trunc");
        }
        if !(self.clip > 0.0) {
            return bad("train.clip must be positive");
        }
        if self.patience == 0 || self.stop_after == 0 || self.max_epochs == 0 {
            return bad("patience, stop_after and max_epochs must be positive");
        }
        if !(self.time_budget_s >= 0.0) {
            return bad("train.time_budget_s must be non-negative");
        }
        Ok(())
    }
}

/// One training or evaluation utterance.
#[derive(Clone, Debug)]
pub struct Example {
    pub setup: FilterSetup,
    /// Stream inputs: `[far end, mixture]` or the microphones.
    pub inputs: Vec<Vec<f64>>,
    /// True echo (echo cancellation) or target signal (beamforming).
    pub reference: Vec<f64>,
    /// Near-end speech, used to find single-talk frames; empty for
    /// beamforming.
    pub near: Vec<f64>,
}

impl Example {
    pub fn aec(scene: &AecScene, cfg: FrameConfig, blocks: usize) -> Result<Self> {
        Ok(Self {
            setup: FilterSetup::aec(cfg, blocks)?,
            inputs: vec![scene.u.clone(), scene.d.clone()],
            reference: scene.d_u.clone(),
            near: scene.s.clone(),
        })
    }

    pub fn gsc(scene: &GscScene, cfg: FrameConfig) -> Result<Self> {
        Ok(Self {
            setup: FilterSetup::gsc(cfg, scene.steering.clone())?,
            inputs: scene.mics.clone(),
            reference: scene.target.clone(),
            near: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.len().div_ceil(self.setup.cfg.hop())
    }

    /// One hop of every input for frame `f`, zero-padded past the end.
    pub fn blocks(&self, f: usize) -> Vec<Vec<f64>> {
        let hop = self.setup.cfg.hop();
        let (lo, len) = (f * hop, self.len());
        self.inputs
            .iter()
            .map(|x| (lo..lo + hop).map(|i| if i < len { x[i] } else { 0.0 }).collect())
            .collect()
    }

    /// `x[n - latency]` for output positions `range`, zero outside `x`.
    fn delayed(&self, x: &[f64], range: Range<usize>) -> Vec<f64> {
        let lat = self.setup.cfg.latency();
        range
            .map(|n| n.checked_sub(lat).and_then(|i| x.get(i)).copied().unwrap_or(0.0))
            .collect()
    }

    /// Loss of the raw stream output `out` covering output samples `range`,
    /// and its gradient. `None` when the segment carries no signal for the
    /// loss to measure.
    pub fn segment_loss(&self, kind: LossKind, range: Range<usize>, out: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        check_len(range.len(), out.len())?;
        match kind {
            LossKind::UnsupEcho => Ok(Some(log_power_grad(out))),
            LossKind::SupEchoLogMse => {
                if self.setup.task != Task::Aec {
                    return Err(Error::Config("the echo loss needs an echo-cancellation example".into()));
                }
                // echo estimate d - e against the true echo
                let d = self.delayed(&self.inputs[1], range.clone());
                let d_u = self.delayed(&self.reference, range);
                let resid: Vec<f64> = d_u.iter().zip(&d).zip(out).map(|((a, b), e)| a - (b - e)).collect();
                let (l, g) = log_power_grad(&resid);
                Ok(Some((l, g)))
            }
            LossKind::NegSiSdr => {
                let s = self.delayed(&self.reference, range);
                if s.iter().all(|&v| v == 0.0) {
                    return Ok(None);
                }
                neg_si_sdr_grad(&s, out).map(Some)
            }
        }
    }

    /// Validation score of a full raw output: single-talk ERLE for echo
    /// cancellation, SI-SDR for beamforming (both in dB).
    pub fn score(&self, out: &[f64]) -> Result<f64> {
        let lat = self.setup.cfg.latency();
        match self.setup.task {
            Task::Aec => metrics::erle_single_talk(&self.inputs[1], out, &self.inputs[0], &self.near, lat, self.setup.cfg.hop()),
            Task::Gsc => {
                if lat >= out.len() {
                    return Err(Error::Degenerate("signal shorter than the pipeline latency".into()));
                }
                let n = out.len() - lat;
                metrics::si_sdr(&self.reference[..n], &out[lat..])
            }
        }
    }
}

/// A finite, indexable collection of examples.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn example(&self, i: usize) -> Result<Example>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }

    fn example(&self, i: usize) -> Result<Example> {
        Ok(self[i].clone())
    }
}

impl Dataset for Vec<Example> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn example(&self, i: usize) -> Result<Example> {
        Ok(self[i].clone())
    }
}

/// Echo-cancellation scenes generated from seeds on demand.
#[derive(Clone, Debug)]
pub struct SyntheticAec {
    pub seeds: Vec<u64>,
    pub ranges: AecSceneRanges,
    pub source: SourceKind,
    pub frames: FrameConfig,
    pub blocks: usize,
}

impl Dataset for SyntheticAec {
    fn len(&self) -> usize {
        self.seeds.len()
    }

    fn example(&self, i: usize) -> Result<Example> {
        let seed = self.seeds[i];
        let scene = gen_aec_scene(seed, &self.ranges.draw(seed), &self.source)?;
        Example::aec(&scene, self.frames, self.blocks)
    }
}

/// Beamforming scenes generated from seeds on demand.
#[derive(Clone, Debug)]
pub struct SyntheticGsc {
    pub seeds: Vec<u64>,
    pub ranges: GscSceneRanges,
    pub source: SourceKind,
    pub frames: FrameConfig,
}

impl Dataset for SyntheticGsc {
    fn len(&self) -> usize {
        self.seeds.len()
    }

    fn example(&self, i: usize) -> Result<Example> {
        let seed = self.seeds[i];
        let scene = gen_gsc_scene(seed, &self.ranges.draw(seed), &self.source, self.frames)?;
        Example::gsc(&scene, self.frames)
    }
}

/// Scene directories on disk.
#[derive(Clone, Debug)]
pub struct SceneDirs {
    pub dirs: Vec<PathBuf>,
    pub frames: FrameConfig,
    /// Filter blocks for echo-cancellation scenes.
    pub blocks: usize,
}

impl SceneDirs {
    /// Every subdirectory of `root` holding a `meta.txt`, sorted by name.
    pub fn scan(root: impl AsRef<std::path::Path>, frames: FrameConfig, blocks: usize) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.txt").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() && root.as_ref().join("meta.txt").is_file() {
            dirs.push(root.as_ref().to_path_buf());
        }
        Ok(Self { dirs, frames, blocks })
    }
}

impl Dataset for SceneDirs {
    fn len(&self) -> usize {
        self.dirs.len()
    }

    fn example(&self, i: usize) -> Result<Example> {
        match read_scene_dir(&self.dirs[i])?.1 {
            Scene::Aec(s) => Example::aec(&s, self.frames, self.blocks),
            Scene::Gsc(s) => Example::gsc(&s, self.frames),
        }
    }
}

/// A slice of another dataset.
pub struct Subset<'a, D: Dataset + ?Sized> {
    pub inner: &'a D,
    pub indices: Vec<usize>,
}

impl<D: Dataset + ?Sized> Dataset for Subset<'_, D> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn example(&self, i: usize) -> Result<Example> {
        self.inner.example(self.indices[i])
    }
}

/// Recorded forward computation of one frame.
#[derive(Clone, Debug)]
struct FrameTape {
    data: FrameData,
    steps: Vec<StepCache>,
}

/// Recorded forward computation over one segment.
#[derive(Clone, Debug, Default)]
pub struct GradientTape {
    frames: Vec<FrameTape>,
}

impl GradientTape {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct Work {
    dsp: Dsp,
    e_frame: Vec<f64>,
    e_spec: Vec<C64>,
    delta: Vec<C64>,
}

impl Work {
    fn new(setup: &FilterSetup) -> Self {
        Self {
            dsp: Dsp::new(setup.cfg),
            e_frame: vec![0.0; setup.cfg.fft_len()],
            e_spec: vec![C64::default(); setup.bins()],
            delta: vec![C64::default(); setup.weights_len()],
        }
    }
}

fn finite(v: &[C64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

fn check_shape(opt: &LearnedOptimizer, setup: &FilterSetup) -> Result<()> {
    let s = opt.shape();
    if s.taps != setup.taps || s.bins != setup.bins() {
        return Err(Error::Shape(format!(
            "optimizer built for {}x{}, filter is {}x{}",
            s.taps,
            s.bins,
            setup.taps,
            setup.bins()
        )));
    }
    Ok(())
}

/// Fresh stream state for `example`.
pub fn initial_state(opt: &LearnedOptimizer, setup: &FilterSetup) -> StreamState<Hidden> {
    StreamState {
        theta: vec![C64::default(); setup.weights_len()],
        opt: Hidden::zeros(opt.shape()),
        front: FrontEnd::new(setup),
        ola: OlaSynth::new(setup.cfg),
        frame: 0,
    }
}

fn forward_frame(
    opt: &LearnedOptimizer,
    mode: StepMode,
    setup: &FilterSetup,
    st: &mut StreamState<Hidden>,
    blocks: &[&[f64]],
    out: &mut [f64],
    w: &mut Work,
    tape: Option<&mut GradientTape>,
) -> Result<()> {
    let data = st.front.push(setup, blocks, &mut w.dsp)?;
    let mut steps = Vec::new();
    for _ in 0..mode.predict_iters {
        data.pass(setup, &st.theta, &mut w.dsp, &mut w.e_frame, &mut w.e_spec)?;
        let input = UpdateInput {
            kind: setup.kind(),
            taps: setup.taps,
            bins: setup.bins(),
            input: data.regressor(setup),
            error: &w.e_spec,
            theta: &st.theta,
        };
        let mut cache = tape.is_some().then(StepCache::default);
        opt.forward(&input, &mut st.opt, &mut w.delta, cache.as_mut())
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, frame: st.frame },
                other => other,
            })?;
        if !finite(&w.delta) {
            return Err(Error::NonFinite {
                what: "filter update".into(),
                frame: st.frame,
            });
        }
        for (t, d) in st.theta.iter_mut().zip(&w.delta) {
            *t += d;
        }
        if let Some(c) = cache {
            steps.push(c);
        }
    }
    if mode.final_update {
        data.pass(setup, &st.theta, &mut w.dsp, &mut w.e_frame, &mut w.e_spec)?;
    }
    if !w.e_frame.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            what: "filter output".into(),
            frame: st.frame,
        });
    }
    st.ola.synthesize(&w.e_frame, out)?;
    st.frame += 1;
    if let Some(t) = tape {
        t.frames.push(FrameTape { data, steps });
    }
    Ok(())
}

/// Runs frames `frames` of `example` from `state`, returning the raw output
/// samples of those frames and optionally recording a tape.
pub fn segment_forward(
    opt: &LearnedOptimizer,
    mode: StepMode,
    example: &Example,
    state: &mut StreamState<Hidden>,
    frames: Range<usize>,
    mut tape: Option<&mut GradientTape>,
) -> Result<Vec<f64>> {
    let setup = &example.setup;
    check_shape(opt, setup)?;
    let hop = setup.cfg.hop();
    let mut w = Work::new(setup);
    let mut out = vec![0.0; frames.len() * hop];
    for (i, f) in frames.enumerate() {
        let blocks = example.blocks(f);
        let views: Vec<&[f64]> = blocks.iter().map(Vec::as_slice).collect();
        forward_frame(opt, mode, setup, state, &views, &mut out[i * hop..(i + 1) * hop], &mut w, tape.as_deref_mut())?;
    }
    Ok(out)
}

/// Reverse pass over a recorded segment given the loss gradient with respect
/// to its output samples. Returns the gradient with respect to the optimizer
/// parameters.
pub fn segment_backward(
    opt: &LearnedOptimizer,
    mode: StepMode,
    setup: &FilterSetup,
    tape: &GradientTape,
    g_out: &[f64],
    first_frame: u64,
) -> Result<Vec<C64>> {
    let (n, r) = (setup.cfg.fft_len(), setup.cfg.hop());
    check_len(tape.len() * r, g_out.len())?;
    let window = OlaSynth::new(setup.cfg).window().to_vec();
    let mut dsp = Dsp::new(setup.cfg);
    let mut g_phi = vec![C64::default(); opt.params().len()];
    let mut g_theta = vec![C64::default(); setup.weights_len()];
    let mut g_hidden = Hidden::zeros(opt.shape());
    let mut g_tail = vec![0.0; n - r];
    let mut g_acc = vec![0.0; n];
    let mut g_frame = vec![0.0; n];
    let zeros = vec![0.0; n];
    let mut g_spec = vec![C64::default(); setup.bins()];
    let mut g_delta = vec![C64::default(); setup.weights_len()];
    let c_n = mode.predict_iters;
    for (f, ft) in tape.frames.iter().enumerate().rev() {
        // overlap-add: out = acc[..R], next tail = acc[R..]
        g_acc[..r].copy_from_slice(&g_out[f * r..(f + 1) * r]);
        g_acc[r..].copy_from_slice(&g_tail);
        for ((g, a), w) in g_frame.iter_mut().zip(&g_acc).zip(&window) {
            *g = a * w;
        }
        g_tail.copy_from_slice(&g_acc[..n - r]);

        if mode.final_update {
            ft.data.pass_adjoint(setup, &g_frame, None, &mut dsp, &mut g_theta)?;
        }
        for c in (0..c_n).rev() {
            g_delta.copy_from_slice(&g_theta);
            g_spec.iter_mut().for_each(|v| *v = C64::default());
            opt.backward(&ft.steps[c], &g_delta, &mut g_hidden, &mut g_spec, &mut g_theta, &mut g_phi)?;
            let g_e = if !mode.final_update && c == c_n - 1 { &g_frame } else { &zeros };
            ft.data.pass_adjoint(setup, g_e, Some(&g_spec), &mut dsp, &mut g_theta)?;
        }
        if !finite(&g_theta) || !g_hidden.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                frame: first_frame + f as u64,
            });
        }
    }
    if !finite(&g_phi) {
        return Err(Error::NonFinite {
            what: "parameter gradient".into(),
            frame: first_frame,
        });
    }
    Ok(g_phi)
}

/// Loss and gradient of one segment.
#[derive(Clone, Debug)]
pub struct SegmentGrad {
    /// `None` when the segment had nothing for the loss to measure; the
    /// gradient is then zero.
    pub loss: Option<f64>,
    pub grad: Vec<C64>,
}

/// Exact gradient of the loss of frames `frames` with respect to every
/// optimizer parameter, treating `state` as a constant. `state` is advanced
/// to the end of the segment.
pub fn grad_wrt_params(
    kind: LossKind,
    opt: &LearnedOptimizer,
    mode: StepMode,
    example: &Example,
    state: &mut StreamState<Hidden>,
    frames: Range<usize>,
) -> Result<SegmentGrad> {
    if frames.is_empty() {
        return Err(Error::Degenerate("empty loss segment".into()));
    }
    let hop = example.setup.cfg.hop();
    let first = state.frame;
    let mut tape = GradientTape::default();
    let range = frames.start * hop..frames.end * hop;
    let out = segment_forward(opt, mode, example, state, frames, Some(&mut tape))?;
    match example.segment_loss(kind, range, &out)? {
        Some((loss, g_out)) => {
            let grad = segment_backward(opt, mode, &example.setup, &tape, &g_out, first)?;
            Ok(SegmentGrad { loss: Some(loss), grad })
        }
        None => Ok(SegmentGrad {
            loss: None,
            grad: vec![C64::default(); opt.params().len()],
        }),
    }
}

/// Loss of frames `frames` without recording anything.
pub fn segment_loss(
    kind: LossKind,
    opt: &LearnedOptimizer,
    mode: StepMode,
    example: &Example,
    state: &mut StreamState<Hidden>,
    frames: Range<usize>,
) -> Result<Option<f64>> {
    let hop = example.setup.cfg.hop();
    let range = frames.start * hop..frames.end * hop;
    let out = segment_forward(opt, mode, example, state, frames, None)?;
    Ok(example.segment_loss(kind, range, &out)?.map(|(l, _)| l))
}

/// Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step on real parameters.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_len(params.len(), grad.len())?;
    check_len(params.len(), state.m.len())?;
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam on complex parameters, real and imaginary parts treated as separate
/// coordinates.
pub fn adam_step_complex(state: &mut AdamState, params: &mut [C64], grad: &[C64], lr: f64) -> Result<()> {
    check_len(params.len(), grad.len())?;
    let mut p: Vec<f64> = params.iter().flat_map(|c| [c.re, c.im]).collect();
    let g: Vec<f64> = grad.iter().flat_map(|c| [c.re, c.im]).collect();
    adam_step(state, &mut p, &g, lr)?;
    for (c, v) in params.iter_mut().zip(p.chunks_exact(2)) {
        *c = C64::new(v[0], v[1]);
    }
    Ok(())
}

pub fn global_norm(grad: &[C64]) -> f64 {
    grad.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Rescales `grad` to norm at most `max_norm`; returns the norm before.
pub fn clip_global_norm(grad: &mut [C64], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|c| *c *= s);
    }
    norm
}

/// Runs an optimizer over a full example and scores the output.
pub fn evaluate_example<O: UpdateRule>(opt: &O, mode: StepMode, example: &Example) -> Result<f64> {
    let views: Vec<&[f64]> = example.inputs.iter().map(Vec::as_slice).collect();
    let mut stream = Stream::new(example.setup.clone(), opt, mode);
    let out = stream.run(&views)?;
    example.score(&out)
}

/// Mean validation score over a dataset, evaluated in parallel.
pub fn validation_metric<O: UpdateRule + Sync>(opt: &O, mode: StepMode, data: &(impl Dataset + ?Sized)) -> Result<f64> {
    let scores = evaluate_all(opt, mode, data)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-example scores over a dataset, evaluated in parallel.
pub fn evaluate_all<O: UpdateRule + Sync>(opt: &O, mode: StepMode, data: &(impl Dataset + ?Sized)) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| evaluate_example(opt, mode, &data.example(i)?))
        .collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,step,loss,val_metric,lr,grad_norm";

    pub fn csv(&self) -> String {
        let val = self.val_metric.map_or(String::new(), |v| v.to_string());
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.loss, val, self.lr, self.grad_norm)
    }
}

/// Why training ended.
#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    NoImprovement,
    TimeBudget,
    /// Loss or gradient became non-finite; the best parameters so far are
    /// kept.
    Diverged { epoch: usize, step: usize, reason: String },
}

/// Outcome of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters with the best validation score.
    pub best: OptimizerParams,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub steps: usize,
    pub stop: StopReason,
    pub log: Vec<LogRow>,
}

fn sample_len(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> usize {
    rng.gen_range(cfg.min_trunc..=cfg.max_trunc)
}

/// Truncated-BPTT training.
///
/// Every epoch visits `epoch_scenes` training examples (all by default) in
/// shuffled batches. The examples of a batch run side by side: each step
/// draws a truncation length, advances every unfinished stream by one
/// segment, averages the segment gradients, clips their global norm and
/// takes one Adam step. Filter weights and optimizer state carry across
/// segments of an utterance but are constants at each boundary. After every
/// epoch the validation score decides the best parameters, learning-rate
/// halving and early stopping. `on_best` is called whenever a new best is
/// found; `log` receives CSV rows as they are produced.
pub fn train_loop(
    train: &(impl Dataset + ?Sized),
    val: &(impl Dataset + ?Sized),
    init: OptimizerParams,
    mode: StepMode,
    kind: LossKind,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut on_best: impl FnMut(&OptimizerParams, f64) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut adam = AdamState::new(params.real_len());
    let mut lr = cfg.lr;
    let mut rows = Vec::new();
    let emit = |row: LogRow, rows: &mut Vec<LogRow>, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", row.csv())?;
            w.flush()?;
        }
        rows.push(row);
        Ok(())
    };
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", LogRow::HEADER)?;
    }

    let mut opt = LearnedOptimizer::new(params.clone());
    let mut best_metric = validation_metric(&opt, mode, val)?;
    let mut best = params.clone();
    let mut best_epoch = 0;
    on_best(&best, best_metric)?;
    emit(
        LogRow {
            epoch: 0,
            step: 0,
            loss: f64::NAN,
            val_metric: Some(best_metric),
            lr,
            grad_norm: 0.0,
        },
        &mut rows,
        &mut log,
    )?;

    let per_epoch = if cfg.epoch_scenes == 0 {
        train.len()
    } else {
        cfg.epoch_scenes
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut steps = 0;
    let mut since_best = 0;
    let mut since_halve = 0;
    let mut epoch = 0;
    let stop = loop {
        if epoch == cfg.max_epochs {
            break StopReason::MaxEpochs;
        }
        epoch += 1;
        let mut picked = Vec::with_capacity(per_epoch);
        while picked.len() < per_epoch {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let mut diverged = None;
        let mut out_of_time = false;
        'batches: for batch in picked.chunks(cfg.batch) {
            let examples: Vec<Example> = batch
                .par_iter()
                .map(|&i| train.example(i))
                .collect::<Result<Vec<_>>>()?;
            let mut states: Vec<StreamState<Hidden>> = examples.iter().map(|e| initial_state(&opt, &e.setup)).collect();
            let total = examples.iter().map(Example::frames).max().unwrap_or(0);
            let mut pos = 0;
            while pos < total {
                let len = sample_len(&mut rng, cfg);
                let end = (pos + len).min(total);
                let results: Vec<Result<SegmentGrad>> = examples
                    .par_iter()
                    .zip(states.par_iter_mut())
                    .map(|(ex, st)| {
                        let stop = end.min(ex.frames());
                        if pos >= stop {
                            return Ok(SegmentGrad {
                                loss: None,
                                grad: Vec::new(),
                            });
                        }
                        grad_wrt_params(kind, &opt, mode, ex, st, pos..stop)
                    })
                    .collect();
                pos = end;
                let mut grad = vec![C64::default(); params.len()];
                let (mut loss_sum, mut active) = (0.0, 0usize);
                for r in results {
                    let sg = match r {
                        Ok(sg) => sg,
                        Err(Error::NonFinite { what, frame }) => {
                            diverged = Some(format!("non-finite {what} at frame {frame}"));
                            break 'batches;
                        }
                        Err(e) => return Err(e),
                    };
                    if let Some(l) = sg.loss {
                        loss_sum += l;
                        active += 1;
                        for (a, b) in grad.iter_mut().zip(&sg.grad) {
                            *a += b;
                        }
                    }
                }
                if active == 0 {
                    continue;
                }
                let scale = 1.0 / active as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                let loss = loss_sum * scale;
                if !loss.is_finite() {
                    diverged = Some("non-finite loss".into());
                    break 'batches;
                }
                let norm = clip_global_norm(&mut grad, cfg.clip);
                if !norm.is_finite() {
                    diverged = Some("non-finite gradient norm".into());
                    break 'batches;
                }
                adam_step_complex(&mut adam, params.values_mut(), &grad, lr)?;
                opt = LearnedOptimizer::new(params.clone());
                steps += 1;
                emit(
                    LogRow {
                        epoch,
                        step: steps,
                        loss,
                        val_metric: None,
                        lr,
                        grad_norm: norm,
                    },
                    &mut rows,
                    &mut log,
                )?;
                if cfg.time_budget_s > 0.0 && start.elapsed().as_secs_f64() > cfg.time_budget_s {
                    out_of_time = true;
                    break 'batches;
                }
            }
        }
        if let Some(reason) = diverged {
            log::warn!("training diverged in epoch {epoch}: {reason}");
            break StopReason::Diverged {
                epoch,
                step: steps,
                reason,
            };
        }

        let metric = match validation_metric(&opt, mode, val) {
            Ok(m) if m.is_finite() => m,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                break StopReason::Diverged {
                    epoch,
                    step: steps,
                    reason: "non-finite validation output".into(),
                }
            }
            Err(e) => return Err(e),
        };
        emit(
            LogRow {
                epoch,
                step: steps,
                loss: rows.last().map_or(f64::NAN, |r| r.loss),
                val_metric: Some(metric),
                lr,
                grad_norm: rows.last().map_or(0.0, |r| r.grad_norm),
            },
            &mut rows,
            &mut log,
        )?;
        if metric > best_metric {
            best_metric = metric;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
            since_halve = 0;
            on_best(&best, best_metric)?;
        } else {
            since_best += 1;
            since_halve += 1;
            if since_halve >= cfg.patience {
                lr *= 0.5;
                since_halve = 0;
                log::info!("validation plateau, learning rate now {lr}");
            }
        }
        if out_of_time {
            break StopReason::TimeBudget;
        }
        if since_best >= cfg.stop_after {
            break StopReason::NoImprovement;
        }
    };
    Ok(TrainReport {
        best,
        best_metric,
        best_epoch,
        epochs: epoch,
        steps,
        stop,
        log: rows,
    })
}
