//! Run configuration as a flat `key=value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every run writes its
//! resolved configuration back in the same format.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::adapt::{StepMode, Task};
use crate::classic::{Kalman, Nlms, Rls};
use crate::error::{Error, Result};
use crate::neural::ModelSize;
use crate::signal::FrameConfig;
use crate::train::{LossKind, TrainConfig};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Typed lookups on a parsed key-value map.
pub trait KvExt {
    fn req(&self, key: &str) -> Result<&String>;
    fn num<T: FromStr>(&self, key: &str) -> Result<T>;
}

impl KvExt for BTreeMap<String, String> {
    fn req(&self, key: &str) -> Result<&String> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.req(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }
}

/// The optimizer of a run: a learned model or a classical baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerChoice {
    Learned(ModelSize),
    Nlms,
    Kalman,
    Rls,
    /// Never adapts; the filter stays at zero.
    Null,
}

impl fmt::Display for OptimizerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerChoice::Learned(s) => write!(f, "{s}"),
            OptimizerChoice::Nlms => f.write_str("nlms"),
            OptimizerChoice::Kalman => f.write_str("kf"),
            OptimizerChoice::Rls => f.write_str("rls"),
            OptimizerChoice::Null => f.write_str("null"),
        }
    }
}

impl FromStr for OptimizerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nlms" => Ok(OptimizerChoice::Nlms),
            "kf" | "kalman" => Ok(OptimizerChoice::Kalman),
            "rls" => Ok(OptimizerChoice::Rls),
            "null" | "none" => Ok(OptimizerChoice::Null),
            other => other.parse().map(OptimizerChoice::Learned),
        }
    }
}

/// Fully resolved configuration of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub optimizer: OptimizerChoice,
    pub mode: StepMode,
    pub loss: LossKind,
    pub seed: u64,
    /// Scene directory (input of train/eval, output of generate).
    pub scenes: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub out: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// Scenes to generate.
    pub count: usize,
    /// Seconds per generated scene.
    pub duration: f64,
    /// Fraction of a scene set held out for validation during training.
    pub val_fraction: f64,
    /// Write processed audio next to the metrics.
    pub write_audio: bool,
    /// Filter blocks of the echo canceller.
    pub blocks: usize,
    /// Frame geometry; checked by [`RunConfig::frames`].
    pub fft_len: usize,
    pub hop: usize,
    /// Timed runs per real-time-factor measurement; 0 skips timing.
    pub rtf_runs: usize,
    /// Cells of the scaling benchmark.
    pub bench_sizes: Vec<ModelSize>,
    pub bench_modes: Vec<StepMode>,
    /// Loss tags `S` and `U`, resolved per task.
    pub bench_losses: Vec<char>,
    pub nlms: Nlms,
    /// NLMS used when the task is the beamformer.
    pub nlms_gsc: Nlms,
    pub kalman: Kalman,
    pub rls: Rls,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Aec,
            optimizer: OptimizerChoice::Learned(ModelSize::S),
            mode: StepMode::PU,
            loss: LossKind::SupEchoLogMse,
            seed: 0,
            scenes: PathBuf::from("scenes"),
            ckpt: None,
            out: PathBuf::from("out"),
            threads: 0,
            count: 10,
            duration: 4.0,
            val_fraction: 0.1,
            write_audio: false,
            blocks: 8,
            fft_len: FrameConfig::default().fft_len(),
            hop: FrameConfig::default().hop(),
            rtf_runs: 5,
            bench_sizes: ModelSize::ALL.to_vec(),
            bench_modes: vec![StepMode::P, StepMode::PU],
            bench_losses: vec!['S', 'U'],
            nlms: Nlms::default(),
            nlms_gsc: Nlms::beamformer(),
            kalman: Kalman::default(),
            rls: Rls::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies `key=value` overrides on top of `self`.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value;
        match key {
            "task" => self.task = v.parse()?,
            "optimizer" | "size" => self.optimizer = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "loss" => self.loss = v.parse()?,
            "seed" => {
                self.seed = p(key, v)?;
                self.train.seed = self.seed;
            }
            "scenes" => self.scenes = v.into(),
            "ckpt" => self.ckpt = if v.is_empty() { None } else { Some(v.into()) },
            "out" => self.out = v.into(),
            "threads" => self.threads = p(key, v)?,
            "count" => self.count = p(key, v)?,
            "duration" => self.duration = p(key, v)?,
            "val_fraction" => self.val_fraction = p(key, v)?,
            "write_audio" => self.write_audio = p(key, v)?,
            "blocks" => self.blocks = p(key, v)?,
            "fft_len" => self.fft_len = p(key, v)?,
            "hop" => self.hop = p(key, v)?,
            "rtf_runs" => self.rtf_runs = p(key, v)?,
            "bench.sizes" => self.bench_sizes = list(v, |x| x.parse())?,
            "bench.modes" => self.bench_modes = list(v, |x| x.parse())?,
            "bench.losses" => {
                self.bench_losses = list(v, |x| match x.parse::<LossKind>()? {
                    LossKind::UnsupEcho => Ok('U'),
                    _ => Ok('S'),
                })?
            }
            "nlms.step_size" => self.nlms.step_size = p(key, v)?,
            "nlms.regularizer" => self.nlms.regularizer = p(key, v)?,
            "gsc.nlms.step_size" => self.nlms_gsc.step_size = p(key, v)?,
            "gsc.nlms.regularizer" => self.nlms_gsc.regularizer = p(key, v)?,
            "kf.transition" => self.kalman.transition = p(key, v)?,
            "kf.process_floor" => self.kalman.process_floor = p(key, v)?,
            "kf.noise_smoothing" => self.kalman.noise_smoothing = p(key, v)?,
            "kf.initial_covariance" => self.kalman.initial_covariance = p(key, v)?,
            "rls.forgetting" => self.rls.forgetting = p(key, v)?,
            "rls.regularizer" => self.rls.regularizer = p(key, v)?,
            "train.batch" => self.train.batch = p(key, v)?,
            "train.lr" => self.train.lr = p(key, v)?,
            "train.min_trunc" => self.train.min_trunc = p(key, v)?,
            "train.max_trunc" => self.train.max_trunc = p(key, v)?,
            "train.clip" => self.train.clip = p(key, v)?,
            "train.patience" => self.train.patience = p(key, v)?,
            "train.stop_after" => self.train.stop_after = p(key, v)?,
            "train.max_epochs" => self.train.max_epochs = p(key, v)?,
            "train.time_budget_s" => self.train.time_budget_s = p(key, v)?,
            "train.epoch_scenes" => self.train.epoch_scenes = p(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// NLMS setting for the configured task.
    pub fn nlms_for_task(&self) -> Nlms {
        match self.task {
            Task::Aec => self.nlms,
            Task::Gsc => self.nlms_gsc,
        }
    }

    pub fn frames(&self) -> Result<FrameConfig> {
        FrameConfig::new(self.fft_len, self.hop)
    }

    /// Maps a supervised loss onto the supervised loss of the task.
    pub fn resolve(&mut self) {
        if self.loss != LossKind::UnsupEcho {
            self.loss = LossKind::supervised(self.task);
        }
    }

    /// Loss of a bench cell tag.
    pub fn loss_for_tag(&self, tag: char) -> LossKind {
        if tag == 'U' {
            LossKind::UnsupEcho
        } else {
            LossKind::supervised(self.task)
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    /// Rejects combinations that have no meaning.
    pub fn validate(&self) -> Result<()> {
        match (self.task, self.optimizer) {
            (Task::Gsc, OptimizerChoice::Kalman) => {
                return Err(Error::Config("the Kalman baseline is for echo cancellation only".into()))
            }
            (Task::Aec, OptimizerChoice::Rls) => {
                return Err(Error::Config("the RLS baseline is for beamforming only".into()))
            }
            _ => {}
        }
        match (self.task, self.loss) {
            (Task::Gsc, LossKind::SupEchoLogMse) => {
                return Err(Error::Config("the echo loss needs an echo-cancellation task".into()))
            }
            (Task::Aec, LossKind::NegSiSdr) => {
                return Err(Error::Config("the SI-SDR loss needs a beamforming task".into()))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.frames()?;
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be positive".into()));
        }
        if self.bench_sizes.is_empty() || self.bench_modes.is_empty() || self.bench_losses.is_empty() {
            return Err(Error::Config("bench lists must not be empty".into()));
        }
        if self.duration <= 0.0 {
            return Err(Error::Config("duration must be positive".into()));
        }
        Nlms::new(self.nlms.step_size, self.nlms.regularizer)?;
        Nlms::new(self.nlms_gsc.step_size, self.nlms_gsc.regularizer)?;
        self.kalman.validate()?;
        Rls::new(self.rls.forgetting, self.rls.regularizer)?;
        self.train.validate()
    }

    /// Run identifier such as `S.S.PU` or `nlms.P`.
    pub fn label(&self) -> String {
        match self.optimizer {
            OptimizerChoice::Learned(_) => format!("{}.{}.{}", self.optimizer, self.loss.tag(), self.mode),
            _ => format!("{}.{}", self.optimizer, self.mode),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("task", self.task.to_string());
        put("optimizer", self.optimizer.to_string());
        put("mode", self.mode.to_string());
        put("loss", self.loss.to_string());
        put("seed", self.seed.to_string());
        put("scenes", self.scenes.display().to_string());
        put("ckpt", self.ckpt.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("out", self.out.display().to_string());
        put("threads", self.threads.to_string());
        put("count", self.count.to_string());
        put("duration", self.duration.to_string());
        put("val_fraction", self.val_fraction.to_string());
        put("write_audio", self.write_audio.to_string());
        put("blocks", self.blocks.to_string());
        put("fft_len", self.fft_len.to_string());
        put("hop", self.hop.to_string());
        put("rtf_runs", self.rtf_runs.to_string());
        put("bench.sizes", join(&self.bench_sizes));
        put("bench.modes", join(&self.bench_modes));
        put("bench.losses", join(&self.bench_losses));
        put("nlms.step_size", self.nlms.step_size.to_string());
        put("nlms.regularizer", self.nlms.regularizer.to_string());
        put("gsc.nlms.step_size", self.nlms_gsc.step_size.to_string());
        put("gsc.nlms.regularizer", self.nlms_gsc.regularizer.to_string());
        put("kf.transition", self.kalman.transition.to_string());
        put("kf.process_floor", self.kalman.process_floor.to_string());
        put("kf.noise_smoothing", self.kalman.noise_smoothing.to_string());
        put("kf.initial_covariance", self.kalman.initial_covariance.to_string());
        put("rls.forgetting", self.rls.forgetting.to_string());
        put("rls.regularizer", self.rls.regularizer.to_string());
        put("train.batch", self.train.batch.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.min_trunc", self.train.min_trunc.to_string());
        put("train.max_trunc", self.train.max_trunc.to_string());
        put("train.clip", self.train.clip.to_string());
        put("train.patience", self.train.patience.to_string());
        put("train.stop_after", self.train.stop_after.to_string());
        put("train.max_epochs", self.train.max_epochs.to_string());
        put("train.time_budget_s", self.train.time_budget_s.to_string());
        put("train.epoch_scenes", self.train.epoch_scenes.to_string());
        s
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("task", "gsc").unwrap();
        c.set("optimizer", "rls").unwrap();
        c.set("loss", "sisdr").unwrap();
        c.set("mode", "PUx2").unwrap();
        c.set("train.lr", "0.001").unwrap();
        c.set("bench.sizes", "S, L").unwrap();
        c.set("bench.losses", "U").unwrap();
        c.set("hop", "128").unwrap();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn invalid_combinations_rejected() {
        let mut c = RunConfig::default();
        c.optimizer = OptimizerChoice::Rls;
        assert!(c.validate().is_err());
        c.task = Task::Gsc;
        c.loss = LossKind::NegSiSdr;
        c.validate().unwrap();
        c.optimizer = OptimizerChoice::Kalman;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_text("bogus=1").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::from_text("# comment\n\nseed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
    }
}
