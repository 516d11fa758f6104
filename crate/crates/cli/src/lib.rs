//! Commands behind the `afopt` binary: scene generation, training,
//! evaluation and the model-size scaling benchmark.
//!
//! Every command writes its resolved configuration as `config.txt` next to
//! its outputs.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use afopt::adapt::{align_output, AnyOptimizer, FilterSetup, StepMode, Stream, Task};
use afopt::config::{OptimizerChoice, RunConfig};
use afopt::cost::{count_flops, cpu_identifier, measure_rtf, CostModel};
use afopt::metrics;
use afopt::neural::{init_params, load_checkpoint, save_checkpoint, LearnedOptimizer, ModelSize, NetShape};
use afopt::scenes::{gen_aec_scene, gen_gsc_scene, read_scene_dir, write_scene_dir, AecSceneRanges, GscSceneRanges, Scene, SceneMeta, SourceKind};
use afopt::signal::wav::{self, WavFormat};
use afopt::train::{train_loop, Example, SceneDirs, StopReason, Subset};
use afopt::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const IO: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Length { .. } | Error::NonRealEndpoint { .. } => exit::CONFIG,
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::Degenerate(_) => exit::DIVERGED,
        Error::Checkpoint(_) | Error::Wav(_) | Error::Io(_) => exit::IO,
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool for 0.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn checked(cfg: &RunConfig) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Seed of scene `i` in a set generated from `base`.
pub fn scene_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_000).wrapping_add(i as u64)
}

/// Writes `cfg.count` scenes to `cfg.scenes/scene_00000`, ... and returns
/// their directories.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let cfg = checked(cfg)?;
    let frames = cfg.frames()?;
    fs::create_dir_all(&cfg.scenes)?;
    let dirs: Vec<PathBuf> = (0..cfg.count).map(|i| cfg.scenes.join(format!("scene_{i:05}"))).collect();
    with_threads(cfg.threads, || {
        dirs.par_iter().enumerate().try_for_each(|(i, dir)| {
            let seed = scene_seed(cfg.seed, i);
            let source = "speech".to_string();
            match cfg.task {
                Task::Aec => {
                    let ranges = AecSceneRanges {
                        duration: cfg.duration,
                        ..AecSceneRanges::default()
                    };
                    let sc = ranges.draw(seed);
                    let scene = gen_aec_scene(seed, &sc, &SourceKind::Speech)?;
                    write_scene_dir(dir, &SceneMeta::Aec { seed, source, cfg: sc }, &Scene::Aec(scene))
                }
                Task::Gsc => {
                    let ranges = GscSceneRanges {
                        duration: cfg.duration,
                        ..GscSceneRanges::default()
                    };
                    let sc = ranges.draw(seed);
                    let scene = gen_gsc_scene(seed, &sc, &SourceKind::Speech, frames)?;
                    write_scene_dir(dir, &SceneMeta::Gsc { seed, source, cfg: sc, frames }, &Scene::Gsc(scene))
                }
            }
        })
    })??;
    write_config(&cfg.scenes, &cfg)?;
    Ok(dirs)
}

/// Summary written to `train_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub steps: usize,
    pub stop: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

/// Drops the first line written through it (a repeated CSV header).
struct SkipHeader<W> {
    inner: W,
    skipping: bool,
}

impl<W: Write> Write for SkipHeader<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.skipping {
            if let Some(p) = buf.iter().position(|&b| b == b'\n') {
                self.skipping = false;
                self.inner.write_all(&buf[p + 1..])?;
            }
            return Ok(buf.len());
        }
        self.inner.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn model_size(cfg: &RunConfig) -> Result<ModelSize> {
    match cfg.optimizer {
        OptimizerChoice::Learned(s) => Ok(s),
        other => Err(Error::Config(format!("{other} is not trainable"))),
    }
}

fn scene_set(cfg: &RunConfig) -> Result<SceneDirs> {
    if !cfg.scenes.is_dir() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("scene directory {} does not exist", cfg.scenes.display()),
        )));
    }
    let set = SceneDirs::scan(&cfg.scenes, cfg.frames()?, cfg.blocks)?;
    if set.dirs.is_empty() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no scenes under {}", cfg.scenes.display()),
        )));
    }
    Ok(set)
}

/// Filter geometry implied by the first scene of a set.
fn setup_of(set: &SceneDirs) -> Result<FilterSetup> {
    use afopt::train::Dataset;
    Ok(set.example(0)?.setup)
}

/// Trains a learned optimizer on `cfg.scenes`. The last `val_fraction` of
/// the scenes validates. With `cfg.ckpt` set, training resumes from that
/// checkpoint and appends to an existing log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let cfg = checked(cfg)?;
    let size = model_size(&cfg)?;
    let set = scene_set(&cfg)?;
    let setup = setup_of(&set)?;
    if setup.task != cfg.task {
        return Err(Error::Config(format!("scenes are {} scenes, config says {}", setup.task, cfg.task)));
    }
    let n = set.dirs.len();
    let n_val = if cfg.val_fraction > 0.0 && n > 1 {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let train = Subset {
        inner: &set,
        indices: (0..n - n_val).collect(),
    };
    let val = Subset {
        inner: &set,
        indices: if n_val == 0 { (0..n).collect() } else { (n - n_val..n).collect() },
    };

    let shape = NetShape::for_size(size, setup.taps, setup.bins())?;
    let init = match &cfg.ckpt {
        Some(p) => {
            let (_, params) = load_checkpoint(p)?;
            if params.shape() != shape {
                return Err(Error::Shape(format!("checkpoint {:?} does not fit {:?}", params.shape(), shape)));
            }
            params
        }
        None => init_params(shape, cfg.seed),
    };

    fs::create_dir_all(&cfg.out)?;
    write_config(&cfg.out, &cfg)?;
    let log_path = cfg.out.join("train_log.csv");
    let resume = cfg.ckpt.is_some() && log_path.is_file();
    let file = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(&log_path)?;
    let mut log = SkipHeader {
        inner: BufWriter::new(file),
        skipping: resume,
    };
    let ckpt = cfg.out.join("best.ckpt");
    let start = Instant::now();
    let report = with_threads(cfg.threads, || {
        train_loop(&train, &val, init, cfg.mode, cfg.loss, &cfg.train, Some(&mut log), |p, m| {
            log::info!("new best {m:.3} dB");
            save_checkpoint(&ckpt, Some(size), p)
        })
    })??;
    log.flush()?;
    let summary = TrainSummary {
        label: cfg.label(),
        best_metric: report.best_metric,
        best_epoch: report.best_epoch,
        epochs: report.epochs,
        steps: report.steps,
        stop: format!("{:?}", report.stop),
        train_scenes: train.indices.len(),
        val_scenes: val.indices.len(),
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: ckpt.clone(),
    };
    fs::write(cfg.out.join("train_report.json"), serde_json::to_string_pretty(&summary).map_err(json_err)?)?;
    if let StopReason::Diverged { epoch, step, reason } = report.stop {
        return Err(Error::Diverged { epoch, step, reason });
    }
    Ok(summary)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Metrics of one scene; `None` where the metric does not apply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    /// ERLE over frames with far-end activity.
    pub erle_db: Option<f64>,
    /// ERLE over single-talk frames.
    pub erle_st_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub sir_db: Option<f64>,
    pub sar_db: Option<f64>,
}

/// One configuration's evaluation: mean metrics and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub task: String,
    pub scenes: usize,
    pub erle_db: Option<f64>,
    pub erle_st_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub sir_db: Option<f64>,
    pub sar_db: Option<f64>,
    pub mflops_per_frame: f64,
    /// `None` when timing was skipped.
    pub rtf: Option<f64>,
    pub params: usize,
    pub cpu: String,
}

impl RunReport {
    /// The headline metric: single-talk ERLE or SI-SDR.
    pub fn metric(&self) -> Option<f64> {
        self.erle_st_db.or(self.si_sdr_db)
    }
}

/// The optimizer a configuration names, its cost model and its parameter
/// count. Learned optimizers are loaded from `cfg.ckpt` and checked against
/// the filter geometry.
pub fn build_optimizer(cfg: &RunConfig, setup: &FilterSetup) -> Result<(AnyOptimizer, CostModel, usize)> {
    Ok(match cfg.optimizer {
        OptimizerChoice::Null => (AnyOptimizer::Null, CostModel::Null, 0),
        OptimizerChoice::Nlms => (AnyOptimizer::Nlms(cfg.nlms_for_task()), CostModel::Nlms, 0),
        OptimizerChoice::Kalman => (AnyOptimizer::Kalman(cfg.kalman), CostModel::Kalman, 0),
        OptimizerChoice::Rls => (AnyOptimizer::Rls(cfg.rls), CostModel::Rls, 0),
        OptimizerChoice::Learned(size) => {
            let path = cfg
                .ckpt
                .as_ref()
                .ok_or_else(|| Error::Config("a learned optimizer needs --ckpt".into()))?;
            let (stored, params) = load_checkpoint(path)?;
            if let Some(s) = stored {
                if s != size {
                    return Err(Error::Shape(format!("checkpoint holds a size {s} model, config asks for {size}")));
                }
            }
            let shape = params.shape();
            if shape.taps != setup.taps || shape.bins != setup.bins() {
                return Err(Error::Shape(format!(
                    "checkpoint expects {}x{} filter weights, scenes need {}x{}",
                    shape.taps,
                    shape.bins,
                    setup.taps,
                    setup.bins()
                )));
            }
            let hidden = shape.hidden;
            let count = params.len();
            (AnyOptimizer::Learned(LearnedOptimizer::new(params)), CostModel::Learned { hidden }, count)
        }
    })
}

fn scene_metrics(name: String, scene: &Scene, setup: &FilterSetup, out: &[f64]) -> Result<SceneMetrics> {
    let lat = setup.cfg.latency();
    let hop = setup.cfg.hop();
    let mut m = SceneMetrics {
        scene: name,
        ..SceneMetrics::default()
    };
    match scene {
        Scene::Aec(s) => {
            m.erle_db = Some(metrics::erle_gated(&s.d, out, &s.u, lat, hop)?);
            m.erle_st_db = Some(metrics::erle_single_talk(&s.d, out, &s.u, &s.s, lat, hop)?);
        }
        Scene::Gsc(s) => {
            if lat >= out.len() {
                return Err(Error::Degenerate("signal shorter than the pipeline latency".into()));
            }
            let n = out.len() - lat;
            let e = &out[lat..];
            let target = &s.target[..n];
            m.si_sdr_db = Some(metrics::si_sdr(target, e)?);
            let refs: Vec<&[f64]> = s.interferer_images.iter().chain(&s.noise).map(|x| &x[..n]).collect();
            let (sir, sar) = metrics::sir_sar(target, &refs, e)?;
            m.sir_db = Some(sir);
            m.sar_db = Some(sar);
        }
    }
    Ok(m)
}

fn mean(rows: &[SceneMetrics], f: impl Fn(&SceneMetrics) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates one configuration on every scene under `cfg.scenes` without
/// writing anything.
pub fn evaluate(cfg: &RunConfig) -> Result<(RunReport, Vec<SceneMetrics>)> {
    let cfg = checked(cfg)?;
    let set = scene_set(&cfg)?;
    let setup = setup_of(&set)?;
    if setup.task != cfg.task {
        return Err(Error::Config(format!("scenes are {} scenes, config says {}", setup.task, cfg.task)));
    }
    let (opt, model, params) = build_optimizer(&cfg, &setup)?;
    let audio_dir = cfg.out.join("audio");
    if cfg.write_audio {
        fs::create_dir_all(&audio_dir)?;
    }
    let rows = with_threads(cfg.threads, || {
        set.dirs
            .par_iter()
            .map(|dir| {
                let (_, scene) = read_scene_dir(dir)?;
                let ex = match &scene {
                    Scene::Aec(s) => Example::aec(s, set.frames, set.blocks)?,
                    Scene::Gsc(s) => Example::gsc(s, set.frames)?,
                };
                let views: Vec<&[f64]> = ex.inputs.iter().map(Vec::as_slice).collect();
                let out = Stream::new(ex.setup.clone(), &opt, cfg.mode).run(&views)?;
                let name = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                if cfg.write_audio {
                    let aligned = align_output(&out, ex.setup.cfg.latency());
                    wav::write(audio_dir.join(format!("{name}.wav")), &[&aligned], WavFormat::Float32)?;
                }
                scene_metrics(name, &scene, &ex.setup, &out)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let rtf = if cfg.rtf_runs > 0 {
        use afopt::train::Dataset;
        let ex = set.example(0)?;
        let views: Vec<&[f64]> = ex.inputs.iter().map(Vec::as_slice).collect();
        Some(measure_rtf(&ex.setup, &opt, cfg.mode, &views, cfg.rtf_runs)?)
    } else {
        None
    };
    let report = RunReport {
        label: cfg.label(),
        task: cfg.task.to_string(),
        scenes: rows.len(),
        erle_db: mean(&rows, |r| r.erle_db),
        erle_st_db: mean(&rows, |r| r.erle_st_db),
        si_sdr_db: mean(&rows, |r| r.si_sdr_db),
        sir_db: mean(&rows, |r| r.sir_db),
        sar_db: mean(&rows, |r| r.sar_db),
        mflops_per_frame: count_flops(&setup, model, cfg.mode).mflops(),
        rtf,
        params,
        cpu: cpu_identifier(),
    };
    Ok((report, rows))
}

/// Evaluates and writes `metrics.csv` (per scene), `report.json` and
/// `config.txt` to `cfg.out`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<RunReport> {
    let (report, rows) = evaluate(cfg)?;
    write_config(&cfg.out, &checked(cfg)?)?;
    let mut w = csv::Writer::from_path(cfg.out.join("metrics.csv")).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    fs::write(cfg.out.join("report.json"), serde_json::to_string_pretty(&report).map_err(json_err)?)?;
    Ok(report)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::Other, e))
}

/// One cell of the scaling table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: String,
    pub mode: String,
    pub loss: String,
    /// Empty for a missing cell.
    pub metric: Option<f64>,
    pub mflops: f64,
    pub rtf: Option<f64>,
    pub params: usize,
    /// `missing` when no checkpoint was found, `ok` otherwise.
    pub status: String,
    /// False when this cell scores below the next smaller present size of
    /// the same mode and loss.
    pub monotone: bool,
}

/// Checkpoint file of a bench cell, e.g. `S.S.PU.ckpt`.
pub fn cell_checkpoint(dir: &Path, size: ModelSize, tag: char, mode: StepMode) -> PathBuf {
    dir.join(format!("{size}.{tag}.{mode}.ckpt"))
}

/// Evaluates every size x mode x loss cell whose checkpoint exists under
/// `cfg.ckpt` (a directory) and writes `scaling.csv` to `cfg.out`. Missing
/// cells become rows with status `missing`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<ScalingRow>> {
    let base = checked(cfg)?;
    let dir = base
        .ckpt
        .clone()
        .ok_or_else(|| Error::Config("bench needs --ckpt pointing at a checkpoint directory".into()))?;
    let set = scene_set(&base)?;
    let setup = setup_of(&set)?;
    let mut rows = Vec::new();
    for &size in &base.bench_sizes {
        for &mode in &base.bench_modes {
            for &tag in &base.bench_losses {
                let path = cell_checkpoint(&dir, size, tag, mode);
                let model = CostModel::Learned { hidden: size.hidden() };
                let mflops = count_flops(&setup, model, mode).mflops();
                let shape = NetShape::for_size(size, setup.taps, setup.bins())?;
                let mut row = ScalingRow {
                    size: size.to_string(),
                    mode: mode.to_string(),
                    loss: tag.to_string(),
                    metric: None,
                    mflops,
                    rtf: None,
                    params: shape.param_count(),
                    status: "missing".into(),
                    monotone: true,
                };
                if path.is_file() {
                    let mut c = base.clone();
                    c.optimizer = OptimizerChoice::Learned(size);
                    c.mode = mode;
                    c.loss = base.loss_for_tag(tag);
                    c.ckpt = Some(path);
                    c.write_audio = false;
                    let (report, _) = evaluate(&c)?;
                    row.metric = report.metric();
                    row.rtf = report.rtf;
                    row.status = "ok".into();
                } else {
                    log::warn!("missing cell {size}.{tag}.{mode}");
                }
                rows.push(row);
            }
        }
    }
    flag_monotonicity(&mut rows);
    write_config(&base.out, &base)?;
    write_scaling_csv(&base.out.join("scaling.csv"), &rows)?;
    Ok(rows)
}

fn size_rank(s: &str) -> usize {
    s.parse::<ModelSize>().map_or(usize::MAX, |m| m.hidden())
}

/// Marks cells that score below the next smaller present size with the same
/// mode and loss.
pub fn flag_monotonicity(rows: &mut [ScalingRow]) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| (rows[i].mode.clone(), rows[i].loss.clone(), size_rank(&rows[i].size)));
    let mut prev: Option<usize> = None;
    for &i in &order {
        rows[i].monotone = true;
        if let Some(p) = prev {
            let same = rows[p].mode == rows[i].mode && rows[p].loss == rows[i].loss;
            if !same {
                prev = None;
            }
        }
        let Some(m) = rows[i].metric else { continue };
        if let Some(pm) = prev.and_then(|p| rows[p].metric) {
            rows[i].monotone = m >= pm;
        }
        prev = Some(i);
    }
}

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scaling_csv(path: &Path) -> Result<Vec<ScalingRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
