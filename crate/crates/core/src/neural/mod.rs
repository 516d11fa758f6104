//! Learned optimizer: per-bin features, banded down-coupling, two complex
//! gated recurrent layers and a banded up-coupling that emits the filter
//! update.
//!
//! Frequency bins are grouped into non-overlapping bands of [`GROUP`] adjacent
//! bins (the last band zero-padded). Every band runs the same network with its
//! own recurrent state. All weights are complex; a gate of complex
//! pre-activation `p` is `sigmoid(Re p) * sigmoid(Im p)` and the candidate
//! activation is the split `tanh(Re p) + j tanh(Im p)`.
//!
//! Per band, with `x` the encoded features of its bins:
//!
//! ```text
//! a  = Wd x + bd
//! h1 = gru1(a, h1)
//! h2 = gru2(h1, h2)
//! o  = Wu h2 + bu        (GROUP bins x taps complex gains)
//! ```
//!
//! and the update of tap `t` in bin `k` is the gain applied to the
//! power-normalized correlation of that tap's input with the error:
//!
//! ```text
//! dt[t,k] = o[t,k] conj(x[t,k]) e[k] / (sum_t |x[t,k]|^2 + POWER_FLOOR)
//! ```
//!
//! For the GSC, whose output subtracts `conj(theta) z`, the direction is
//! `x[t,k] conj(e[k])` instead.
//!
//! The network decides per tap and frame how far, and with what phase
//! rotation, to move along that direction; zero gains leave the filter
//! still.
//!
//! with `gru(x, h)`:
//!
//! ```text
//! r  = gate(Wr x + Ur h + br)
//! z  = gate(Wz x + Uz h + bz)
//! n  = splittanh(Wn x + r * (Un h) + bn)
//! h' = (1 - z) h + z n
//! ```

mod checkpoint;
pub(crate) mod gemm;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{check_len, Error, Result};
use crate::signal::C64;
use crate::update::{FilterKind, UpdateInput, UpdateRule};
use gemm::{gemm, View};

/// Adjacent bins that share one band of the network.
pub const GROUP: usize = 5;

/// Regularizer of the input power that normalizes the update direction.
pub const POWER_FLOOR: f64 = 100.0;

/// Gain applied to the fan-in bound of the up-coupling at initialization, so
/// an untrained optimizer starts with small steps.
pub const UP_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    S,
    M,
    L,
}

impl ModelSize {
    pub const ALL: [ModelSize; 3] = [ModelSize::S, ModelSize::M, ModelSize::L];

    pub fn hidden(self) -> usize {
        match self {
            ModelSize::S => 16,
            ModelSize::M => 32,
            ModelSize::L => 64,
        }
    }

    pub fn tag(self) -> char {
        match self {
            ModelSize::S => 'S',
            ModelSize::M => 'M',
            ModelSize::L => 'L',
        }
    }

    pub fn from_hidden(hidden: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.hidden() == hidden)
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" => Ok(ModelSize::S),
            "M" | "m" => Ok(ModelSize::M),
            "L" | "l" => Ok(ModelSize::L),
            other => Err(Error::Config(format!("unknown model size {other:?}"))),
        }
    }
}

/// One named parameter block, row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dimensions of a learned optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Recurrent width `H`.
    pub hidden: usize,
    /// Filter taps per bin: blocks `B` (echo canceller) or channels `M`
    /// (beamformer).
    pub taps: usize,
    /// Frequency bins `K`.
    pub bins: usize,
}

#[derive(Clone, Debug)]
struct GruLayout {
    w: Range<usize>,
    u: Range<usize>,
    b: Range<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    down_w: Range<usize>,
    down_b: Range<usize>,
    gru: [GruLayout; 2],
    up_w: Range<usize>,
    up_b: Range<usize>,
}

impl NetShape {
    pub fn new(hidden: usize, taps: usize, bins: usize) -> Result<Self> {
        if hidden == 0 || taps == 0 || bins == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(Self { hidden, taps, bins })
    }

    pub fn for_size(size: ModelSize, taps: usize, bins: usize) -> Result<Self> {
        Self::new(size.hidden(), taps, bins)
    }

    /// Complex features per bin: the filter input of every tap, the error and
    /// the current weights of every tap.
    pub fn features_per_bin(&self) -> usize {
        2 * self.taps + 1
    }

    pub fn bands(&self) -> usize {
        self.bins.div_ceil(GROUP)
    }

    pub fn input_dim(&self) -> usize {
        GROUP * self.features_per_bin()
    }

    pub fn output_dim(&self) -> usize {
        GROUP * self.taps
    }

    /// Named parameter blocks in flat order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let h = self.hidden;
        let b = |name: &str, rows, cols| BlockSpec {
            name: name.to_string(),
            rows,
            cols,
        };
        let mut v = vec![b("down.w", h, self.input_dim()), b("down.b", h, 1)];
        for layer in ["gru1", "gru2"] {
            v.push(b(&format!("{layer}.w"), 3 * h, h));
            v.push(b(&format!("{layer}.u"), 3 * h, h));
            v.push(b(&format!("{layer}.b"), 3 * h, 1));
        }
        v.push(b("up.w", self.output_dim(), h));
        v.push(b("up.b", self.output_dim(), 1));
        v
    }

    /// Number of complex parameters.
    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(BlockSpec::len).sum()
    }

    fn layout(&self) -> Layout {
        let mut ranges = Vec::new();
        let mut at = 0;
        for b in self.blocks() {
            ranges.push(at..at + b.len());
            at += b.len();
        }
        let r = |i: usize| ranges[i].clone();
        Layout {
            down_w: r(0),
            down_b: r(1),
            gru: [
                GruLayout {
                    w: r(2),
                    u: r(3),
                    b: r(4),
                },
                GruLayout {
                    w: r(5),
                    u: r(6),
                    b: r(7),
                },
            ],
            up_w: r(8),
            up_b: r(9),
        }
    }
}

/// Flat complex parameter vector of a learned optimizer.
///
/// Entry `i` of the real view is `Re phi[i/2]` for even `i` and `Im phi[i/2]`
/// for odd `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerParams {
    shape: NetShape,
    values: Vec<C64>,
}

impl OptimizerParams {
    pub fn new(shape: NetShape, values: Vec<C64>) -> Result<Self> {
        check_len(shape.param_count(), values.len())?;
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Degenerate("non-finite optimizer parameter".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            values: vec![C64::default(); shape.param_count()],
        }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn real_len(&self) -> usize {
        2 * self.values.len()
    }

    pub fn real(&self, i: usize) -> f64 {
        let c = self.values[i / 2];
        if i % 2 == 0 {
            c.re
        } else {
            c.im
        }
    }

    pub fn set_real(&mut self, i: usize, v: f64) {
        let c = &mut self.values[i / 2];
        if i % 2 == 0 {
            c.re = v;
        } else {
            c.im = v;
        }
    }

    fn range(&self, name: &str) -> Option<Range<usize>> {
        let mut at = 0;
        for b in self.shape.blocks() {
            if b.name == name {
                return Some(at..at + b.len());
            }
            at += b.len();
        }
        None
    }

    pub fn block(&self, name: &str) -> Option<&[C64]> {
        self.range(name).map(|r| &self.values[r])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [C64]> {
        self.range(name).map(move |r| &mut self.values[r])
    }
}

/// Unitary `n x n` matrix from Gram-Schmidt on complex Gaussian columns.
fn random_unitary(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    // cols[j] is column j
    let mut cols: Vec<Vec<C64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        for _ in 0..2 {
            for c in &cols {
                let proj: C64 = c.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                for (x, a) in v.iter_mut().zip(c) {
                    *x -= proj * a;
                }
            }
        }
        let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    let mut m = vec![C64::default(); n * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, x) in c.iter().enumerate() {
            m[i * n + j] = *x;
        }
    }
    m
}

fn fill_uniform(dst: &mut [C64], bound: f64, rng: &mut ChaCha8Rng) {
    for d in dst {
        *d = C64::new(rng.gen_range(-bound..=bound), rng.gen_range(-bound..=bound));
    }
}

/// Deterministic initialization: unitary recurrent kernels, fan-in uniform
/// input kernels, zero biases.
pub fn init_params(shape: NetShape, seed: u64) -> OptimizerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = OptimizerParams::zeros(shape);
    let lay = shape.layout();
    let h = shape.hidden;
    let v = &mut p.values;
    fill_uniform(&mut v[lay.down_w.clone()], 1.0 / (shape.input_dim() as f64).sqrt(), &mut rng);
    for g in &lay.gru {
        fill_uniform(&mut v[g.w.clone()], 1.0 / (h as f64).sqrt(), &mut rng);
        for gate in 0..3 {
            let u = random_unitary(h, &mut rng);
            let start = g.u.start + gate * h * h;
            v[start..start + h * h].copy_from_slice(&u);
        }
    }
    fill_uniform(&mut v[lay.up_w.clone()], UP_INIT_SCALE / (h as f64).sqrt(), &mut rng);
    p
}

/// Recurrent state of a learned optimizer: one `[H x bands]` matrix per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hidden {
    pub h1: Vec<C64>,
    pub h2: Vec<C64>,
}

impl Hidden {
    pub fn zeros(shape: NetShape) -> Self {
        let n = shape.hidden * shape.bands();
        Self {
            h1: vec![C64::default(); n],
            h2: vec![C64::default(); n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h1
            .iter()
            .chain(&self.h2)
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    fn fill_zero(&mut self) {
        self.h1.iter_mut().chain(self.h2.iter_mut()).for_each(|c| *c = C64::default());
    }
}

/// Per-bin features `[x_k (taps), e_k, theta_k (taps)]`, bin-major `[K x (2T+1)]`.
pub fn build_features(x: &[C64], e: &[C64], theta: &[C64], taps: usize, bins: usize) -> Result<Vec<C64>> {
    check_len(taps * bins, x.len())?;
    check_len(bins, e.len())?;
    check_len(taps * bins, theta.len())?;
    let f = 2 * taps + 1;
    let mut out = vec![C64::default(); bins * f];
    for k in 0..bins {
        let row = &mut out[k * f..(k + 1) * f];
        for t in 0..taps {
            row[t] = x[t * bins + k];
            row[taps + 1 + t] = theta[t * bins + k];
        }
        row[taps] = e[k];
    }
    Ok(out)
}

/// `c -> [asinh(Re c), asinh(Im c)]`.
pub fn encode(c: C64) -> [f64; 2] {
    [c.re.asinh(), c.im.asinh()]
}

/// Inverse of [`encode`].
pub fn decode(v: [f64; 2]) -> C64 {
    C64::new(v[0].sinh(), v[1].sinh())
}

#[inline]
fn encode_c(c: C64) -> C64 {
    C64::new(c.re.asinh(), c.im.asinh())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn gate(p: C64) -> f64 {
    sigmoid(p.re) * sigmoid(p.im)
}

/// Gradient of `gate` at `p` scaled by an incoming real gradient.
#[inline]
fn gate_grad(p: C64, g: f64) -> C64 {
    let (a, b) = (sigmoid(p.re), sigmoid(p.im));
    C64::new(g * a * (1.0 - a) * b, g * a * b * (1.0 - b))
}

#[inline]
fn split_tanh(p: C64) -> C64 {
    C64::new(p.re.tanh(), p.im.tanh())
}

/// Activations of one recurrent layer kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct GruCache {
    x: Vec<C64>,
    h: Vec<C64>,
    /// Pre-activations of the r and z gates `[2H x G]`.
    pre_rz: Vec<C64>,
    /// `Un h` `[H x G]`.
    qn: Vec<C64>,
    /// Candidate `[H x G]`.
    n: Vec<C64>,
}

/// Everything one optimizer step needs for its backward pass.
#[derive(Clone, Debug, Default)]
pub struct StepCache {
    input: Vec<C64>,
    layers: [GruCache; 2],
    h2: Vec<C64>,
    out: Vec<C64>,
    gain: Vec<C64>,
    /// Error as it enters the update, conjugated for the GSC.
    err: Vec<C64>,
    conj_err: bool,
}

/// A learned optimizer ready for inference and differentiation.
#[derive(Clone, Debug)]
pub struct LearnedOptimizer {
    params: OptimizerParams,
    conj: Vec<C64>,
    layout: Layout,
}

impl LearnedOptimizer {
    pub fn new(params: OptimizerParams) -> Self {
        let conj = params.values.iter().map(|c| c.conj()).collect();
        let layout = params.shape.layout();
        Self {
            params,
            conj,
            layout,
        }
    }

    pub fn params(&self) -> &OptimizerParams {
        &self.params
    }

    pub fn shape(&self) -> NetShape {
        self.params.shape
    }

    pub fn into_params(self) -> OptimizerParams {
        self.params
    }

    fn check_step(&self, x: &[C64], e: &[C64], theta: &[C64], hidden: &Hidden) -> Result<()> {
        let s = self.shape();
        check_len(s.taps * s.bins, x.len())?;
        check_len(s.bins, e.len())?;
        check_len(s.taps * s.bins, theta.len())?;
        check_len(s.hidden * s.bands(), hidden.h1.len())?;
        check_len(s.hidden * s.bands(), hidden.h2.len())
    }

    /// Encoded, banded network input `[input_dim x bands]`.
    fn band_input(&self, x: &[C64], e: &[C64], theta: &[C64], out: &mut Vec<C64>) {
        let s = self.shape();
        let (t_n, k_n, g_n, f_n) = (s.taps, s.bins, s.bands(), s.features_per_bin());
        out.clear();
        out.resize(s.input_dim() * g_n, C64::default());
        for g in 0..g_n {
            for j in 0..GROUP {
                let k = g * GROUP + j;
                if k >= k_n {
                    break;
                }
                let base = j * f_n;
                for t in 0..t_n {
                    out[(base + t) * g_n + g] = encode_c(x[t * k_n + k]);
                    out[(base + t_n + 1 + t) * g_n + g] = encode_c(theta[t * k_n + k]);
                }
                out[(base + t_n) * g_n + g] = encode_c(e[k]);
            }
        }
    }

    fn gru_forward(&self, layer: usize, x: &[C64], h: &mut [C64], cache: Option<&mut GruCache>) {
        let s = self.shape();
        let (hd, g_n) = (s.hidden, s.bands());
        let lay = &self.layout.gru[layer];
        let phi = &self.params.values;
        let mut p = vec![C64::default(); 3 * hd * g_n];
        let mut q = vec![C64::default(); 3 * hd * g_n];
        gemm(&phi[lay.w.clone()], View::row_major(3 * hd, hd), x, View::row_major(hd, g_n), 0.0, &mut p, View::row_major(3 * hd, g_n));
        gemm(&phi[lay.u.clone()], View::row_major(3 * hd, hd), h, View::row_major(hd, g_n), 0.0, &mut q, View::row_major(3 * hd, g_n));
        let bias = &phi[lay.b.clone()];
        // p rows [0, 2H) become the r/z pre-activations
        for i in 0..2 * hd {
            let b = bias[i];
            for (pv, qv) in p[i * g_n..(i + 1) * g_n].iter_mut().zip(&q[i * g_n..(i + 1) * g_n]) {
                *pv += qv + b;
            }
        }
        let mut n = vec![C64::default(); hd * g_n];
        let old_h = cache.as_ref().map(|_| h.to_vec());
        for i in 0..hd {
            let b = bias[2 * hd + i];
            for g in 0..g_n {
                let idx = i * g_n + g;
                let r = gate(p[idx]);
                let z = gate(p[(hd + i) * g_n + g]);
                let pn = p[(2 * hd + i) * g_n + g] + q[(2 * hd + i) * g_n + g] * r + b;
                let nv = split_tanh(pn);
                n[idx] = nv;
                h[idx] = h[idx] * (1.0 - z) + nv * z;
            }
        }
        if let Some(c) = cache {
            c.x.clear();
            c.x.extend_from_slice(x);
            c.h = old_h.unwrap_or_default();
            p.truncate(2 * hd * g_n);
            c.pre_rz = p;
            c.qn = q.split_off(2 * hd * g_n);
            c.n = n;
        }
    }

    /// Runs one optimizer step. Writes `Delta` (`[taps x K]`) and advances
    /// `hidden`; fills `cache` for a later [`LearnedOptimizer::backward`].
    pub fn forward(
        &self,
        step: &UpdateInput<'_>,
        hidden: &mut Hidden,
        delta: &mut [C64],
        mut cache: Option<&mut StepCache>,
    ) -> Result<()> {
        let (x, e, theta) = (step.input, step.error, step.theta);
        self.check_step(x, e, theta, hidden)?;
        let s = self.shape();
        check_len(s.taps * s.bins, delta.len())?;
        let (hd, g_n) = (s.hidden, s.bands());
        let phi = &self.params.values;
        let lay = &self.layout;

        let mut input = Vec::new();
        self.band_input(x, e, theta, &mut input);

        let mut a = vec![C64::default(); hd * g_n];
        for (i, row) in a.chunks_exact_mut(g_n).enumerate() {
            row.iter_mut().for_each(|v| *v = phi[lay.down_b.start + i]);
        }
        gemm(&phi[lay.down_w.clone()], View::row_major(hd, s.input_dim()), &input, View::row_major(s.input_dim(), g_n), 1.0, &mut a, View::row_major(hd, g_n));

        let (c1, c2) = match cache.as_deref_mut() {
            Some(c) => {
                let [l1, l2] = &mut c.layers;
                (Some(l1), Some(l2))
            }
            None => (None, None),
        };
        self.gru_forward(0, &a, &mut hidden.h1, c1);
        self.gru_forward(1, &hidden.h1, &mut hidden.h2, c2);
        if !hidden.is_finite() {
            return Err(Error::NonFinite {
                what: "optimizer hidden state".into(),
                frame: 0,
            });
        }

        let od = s.output_dim();
        let mut out = vec![C64::default(); od * g_n];
        for (i, row) in out.chunks_exact_mut(g_n).enumerate() {
            row.iter_mut().for_each(|v| *v = phi[lay.up_b.start + i]);
        }
        gemm(&phi[lay.up_w.clone()], View::row_major(od, hd), &hidden.h2, View::row_major(hd, g_n), 1.0, &mut out, View::row_major(od, g_n));

        let (t_n, k_n) = (s.taps, s.bins);
        // MDF: dt[t,k] = o[t,k] conj(x[t,k]) e[k] / (sum_t |x[t,k]|^2 + floor)
        // GSC: the output subtracts conj(theta) z, so x and e swap conjugation
        let gsc = step.kind == FilterKind::Gsc;
        let mut gain = vec![C64::default(); t_n * k_n];
        for k in 0..k_n {
            let p: f64 = (0..t_n).map(|t| x[t * k_n + k].norm_sqr()).sum::<f64>() + POWER_FLOOR;
            for t in 0..t_n {
                let xv = x[t * k_n + k];
                gain[t * k_n + k] = if gsc { xv } else { xv.conj() } / p;
            }
        }
        let err: Vec<C64> = if gsc { e.iter().map(|v| v.conj()).collect() } else { e.to_vec() };
        for g in 0..g_n {
            for j in 0..GROUP {
                let k = g * GROUP + j;
                if k >= k_n {
                    break;
                }
                for t in 0..t_n {
                    let i = t * k_n + k;
                    delta[i] = out[(j * t_n + t) * g_n + g] * gain[i] * err[k];
                }
            }
        }

        if let Some(c) = cache {
            c.out = out;
            c.gain = gain;
            c.err = err;
            c.conj_err = gsc;
            c.input = input;
            c.h2.clear();
            c.h2.extend_from_slice(&hidden.h2);
        }
        Ok(())
    }

    /// Backward pass of one recurrent layer. `g_h` holds the gradient with
    /// respect to the new hidden state on entry and with respect to the old
    /// one on exit; the input gradient is written to `g_x`.
    fn gru_backward(&self, layer: usize, c: &GruCache, g_h: &mut [C64], g_x: &mut [C64], g_phi: &mut [C64]) {
        let s = self.shape();
        let (hd, g_n) = (s.hidden, s.bands());
        let lay = &self.layout.gru[layer];
        let mut gp = vec![C64::default(); 3 * hd * g_n];
        let mut gq = vec![C64::default(); 3 * hd * g_n];
        for i in 0..hd {
            for g in 0..g_n {
                let idx = i * g_n + g;
                let pr = c.pre_rz[idx];
                let pz = c.pre_rz[(hd + i) * g_n + g];
                let (r, z) = (gate(pr), gate(pz));
                let n = c.n[idx];
                let gh = g_h[idx];
                let g_n_val = gh * z;
                let g_z = (gh.conj() * (n - c.h[idx])).re;
                let g_pn = C64::new(g_n_val.re * (1.0 - n.re * n.re), g_n_val.im * (1.0 - n.im * n.im));
                let g_r = (g_pn.conj() * c.qn[idx]).re;
                let g_pr = gate_grad(pr, g_r);
                let g_pz = gate_grad(pz, g_z);
                gp[idx] = g_pr;
                gp[(hd + i) * g_n + g] = g_pz;
                gp[(2 * hd + i) * g_n + g] = g_pn;
                gq[idx] = g_pr;
                gq[(hd + i) * g_n + g] = g_pz;
                gq[(2 * hd + i) * g_n + g] = g_pn * r;
                g_h[idx] = gh * (1.0 - z);
            }
        }
        // bias
        for (i, row) in gp.chunks_exact(g_n).enumerate() {
            g_phi[lay.b.start + i] += row.iter().sum::<C64>();
        }
        // weights: gW += gp x^H, gU += gq h^H
        let xc: Vec<C64> = c.x.iter().map(|v| v.conj()).collect();
        let hc: Vec<C64> = c.h.iter().map(|v| v.conj()).collect();
        gemm(&gp, View::row_major(3 * hd, g_n), &xc, View::transposed(hd, g_n), 1.0, &mut g_phi[lay.w.clone()], View::row_major(3 * hd, hd));
        gemm(&gq, View::row_major(3 * hd, g_n), &hc, View::transposed(hd, g_n), 1.0, &mut g_phi[lay.u.clone()], View::row_major(3 * hd, hd));
        // inputs: g_x = W^H gp, g_h += U^H gq
        gemm(&self.conj[lay.w.clone()], View::transposed(3 * hd, hd), &gp, View::row_major(3 * hd, g_n), 0.0, g_x, View::row_major(hd, g_n));
        gemm(&self.conj[lay.u.clone()], View::transposed(3 * hd, hd), &gq, View::row_major(3 * hd, g_n), 1.0, g_h, View::row_major(hd, g_n));
    }

    /// Reverse-mode pass through one [`LearnedOptimizer::forward`] call.
    ///
    /// `g_delta` is the loss gradient with respect to `Delta`; `g_hidden`
    /// holds the gradient with respect to the new hidden state on entry and
    /// with respect to the old one on exit. Gradients with respect to the
    /// error spectrum and the weights features are accumulated into `g_e` and
    /// `g_theta`; parameter gradients are accumulated into `g_phi`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &StepCache,
        g_delta: &[C64],
        g_hidden: &mut Hidden,
        g_e: &mut [C64],
        g_theta: &mut [C64],
        g_phi: &mut [C64],
    ) -> Result<()> {
        let s = self.shape();
        let (hd, g_n, t_n, k_n) = (s.hidden, s.bands(), s.taps, s.bins);
        check_len(t_n * k_n, g_delta.len())?;
        check_len(k_n, g_e.len())?;
        check_len(t_n * k_n, g_theta.len())?;
        check_len(self.params.len(), g_phi.len())?;
        let lay = &self.layout;
        let od = s.output_dim();

        let mut g_out = vec![C64::default(); od * g_n];
        for g in 0..g_n {
            for j in 0..GROUP {
                let k = g * GROUP + j;
                if k >= k_n {
                    break;
                }
                for t in 0..t_n {
                    let i = (j * t_n + t) * g_n + g;
                    let sc = cache.gain[t * k_n + k];
                    let gd = g_delta[t * k_n + k];
                    let a = cache.out[i] * sc;
                    g_e[k] += if cache.conj_err { gd.conj() * a } else { a.conj() * gd };
                    g_out[i] = gd * (sc * cache.err[k]).conj();
                }
            }
        }
        for (i, row) in g_out.chunks_exact(g_n).enumerate() {
            g_phi[lay.up_b.start + i] += row.iter().sum::<C64>();
        }
        let h2c: Vec<C64> = cache.h2.iter().map(|v| v.conj()).collect();
        gemm(&g_out, View::row_major(od, g_n), &h2c, View::transposed(hd, g_n), 1.0, &mut g_phi[lay.up_w.clone()], View::row_major(od, hd));
        gemm(&self.conj[lay.up_w.clone()], View::transposed(od, hd), &g_out, View::row_major(od, g_n), 1.0, &mut g_hidden.h2, View::row_major(hd, g_n));

        let mut g_x2 = vec![C64::default(); hd * g_n];
        self.gru_backward(1, &cache.layers[1], &mut g_hidden.h2, &mut g_x2, g_phi);
        for (a, b) in g_hidden.h1.iter_mut().zip(&g_x2) {
            *a += b;
        }
        let mut g_a = vec![C64::default(); hd * g_n];
        self.gru_backward(0, &cache.layers[0], &mut g_hidden.h1, &mut g_a, g_phi);

        let id = s.input_dim();
        for (i, row) in g_a.chunks_exact(g_n).enumerate() {
            g_phi[lay.down_b.start + i] += row.iter().sum::<C64>();
        }
        let inc: Vec<C64> = cache.input.iter().map(|v| v.conj()).collect();
        gemm(&g_a, View::row_major(hd, g_n), &inc, View::transposed(id, g_n), 1.0, &mut g_phi[lay.down_w.clone()], View::row_major(hd, id));
        let mut g_in = vec![C64::default(); id * g_n];
        gemm(&self.conj[lay.down_w.clone()], View::transposed(hd, id), &g_a, View::row_major(hd, g_n), 0.0, &mut g_in, View::row_major(id, g_n));

        // through the asinh encoding into e and theta
        let f_n = s.features_per_bin();
        let back = |g: C64, enc: C64| C64::new(g.re / enc.re.cosh(), g.im / enc.im.cosh());
        for g in 0..g_n {
            for j in 0..GROUP {
                let k = g * GROUP + j;
                if k >= k_n {
                    break;
                }
                let base = j * f_n;
                let ie = (base + t_n) * g_n + g;
                g_e[k] += back(g_in[ie], cache.input[ie]);
                for t in 0..t_n {
                    let it = (base + t_n + 1 + t) * g_n + g;
                    g_theta[t * k_n + k] += back(g_in[it], cache.input[it]);
                }
            }
        }
        Ok(())
    }
}

impl UpdateRule for LearnedOptimizer {
    type State = Hidden;

    fn init_state(&self, _taps: usize, _bins: usize) -> Hidden {
        Hidden::zeros(self.shape())
    }

    fn step(&self, state: &mut Hidden, input: &UpdateInput<'_>, delta: &mut [C64]) -> Result<()> {
        let s = self.shape();
        if input.taps != s.taps || input.bins != s.bins {
            return Err(Error::Shape(format!(
                "optimizer built for {}x{}, filter is {}x{}",
                s.taps, s.bins, input.taps, input.bins
            )));
        }
        self.forward(input, state, delta, None)
    }
}

/// Zeroes a hidden state in place (stream restart).
pub fn reset_hidden(h: &mut Hidden) {
    h.fill_zero();
}

/// Complex multiply-accumulates of one optimizer step (network only).
pub fn step_macs(shape: NetShape) -> usize {
    let h = shape.hidden;
    let per_band = h * shape.input_dim() + 2 * (2 * 3 * h * h) + shape.output_dim() * h;
    per_band * shape.bands()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let counts: Vec<usize> = ModelSize::ALL
            .iter()
            .map(|&s| NetShape::for_size(s, 8, 257).unwrap().param_count())
            .collect();
        assert_eq!(counts, vec![5224, 16552, 57640]);
    }

    #[test]
    fn init_is_deterministic_and_unitary() {
        let shape = NetShape::new(8, 2, 9).unwrap();
        let a = init_params(shape, 3);
        let b = init_params(shape, 3);
        assert_eq!(a, b);
        assert_ne!(a, init_params(shape, 4));
        let u = a.block("gru1.u").unwrap();
        let h = 8;
        for gate in 0..3 {
            let m = &u[gate * h * h..(gate + 1) * h * h];
            for i in 0..h {
                for j in 0..h {
                    let dot: C64 = (0..h).map(|r| m[r * h + i].conj() * m[r * h + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).norm() < 1e-10);
                }
            }
        }
        assert!(a.block("gru2.b").unwrap().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn zero_up_coupling_gives_zero_update() {
        let shape = NetShape::new(4, 2, 9).unwrap();
        let mut p = init_params(shape, 1);
        p.block_mut("up.w").unwrap().iter_mut().for_each(|c| *c = C64::default());
        let net = LearnedOptimizer::new(p);
        let x: Vec<C64> = (0..18).map(|i| C64::new(i as f64, 1.0)).collect();
        let e = vec![C64::new(0.3, -0.2); 9];
        let th = vec![C64::new(0.1, 0.0); 18];
        let mut hid = Hidden::zeros(shape);
        let mut d = vec![C64::new(5.0, 5.0); 18];
        let input = UpdateInput {
            kind: FilterKind::Mdf,
            taps: 2,
            bins: 9,
            input: &x,
            error: &e,
            theta: &th,
        };
        net.forward(&input, &mut hid, &mut d, None).unwrap();
        assert!(d.iter().all(|c| c.norm() == 0.0));
        assert!(hid.h1.iter().any(|c| c.norm() > 0.0));
    }

    #[test]
    fn encode_closed_form() {
        assert_eq!(encode(C64::default()), [0.0, 0.0]);
        let v = encode(C64::new(1.0, 0.0));
        assert!((v[0] - 0.881_373_587).abs() < 1e-9 && v[1] == 0.0);
        let c = C64::new(-3.5, 1e-3);
        assert!((decode(encode(c)) - c).norm() < 1e-12);
    }

    #[test]
    fn feature_arity() {
        let f = build_features(&[C64::default(); 16], &[C64::default(); 2], &[C64::default(); 16], 8, 2).unwrap();
        assert_eq!(f.len(), 2 * 17);
    }
}
