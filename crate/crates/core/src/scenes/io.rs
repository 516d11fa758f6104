//! Scene directories: WAV files plus a `meta.txt` of `key=value` lines.
//!
//! Generated scenes are fully determined by their metadata and are
//! regenerated from it on load; the WAV files are written for listening and
//! for external tools. A directory whose metadata says `source=wav` is read
//! from its WAV files instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{gen_aec_scene, gen_gsc_scene, AecScene, AecSceneConfig, GscScene, GscSceneConfig, SourceKind};
use crate::config::{parse_kv, KvExt};
use crate::error::{Error, Result};
use crate::signal::wav::{self, WavFormat};
use crate::signal::FrameConfig;

/// Parsed `meta.txt`.
#[derive(Clone, Debug, PartialEq)]
pub enum SceneMeta {
    Aec { seed: u64, source: String, cfg: AecSceneConfig },
    Gsc { seed: u64, source: String, cfg: GscSceneConfig, frames: FrameConfig },
    /// Externally recorded echo-cancellation data.
    AecRecorded,
}

impl SceneMeta {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            SceneMeta::Aec { seed, source, cfg } => {
                let _ = writeln!(s, "kind=aec\nseed={seed}\nsource={source}");
                let _ = writeln!(s, "duration={}\nser_db={}\nsnr_db={}\nrt60={}", cfg.duration, cfg.ser_db, cfg.snr_db, cfg.rt60);
                let _ = writeln!(s, "nonlinear={}\ndouble_talk={}\nnear_start={}", cfg.nonlinear, cfg.double_talk, cfg.near_start);
                let _ = writeln!(s, "far_gain_db={}\nnoise={}", cfg.far_gain_db, cfg.noise);
            }
            SceneMeta::Gsc { seed, source, cfg, frames } => {
                let _ = writeln!(s, "kind=gsc\nseed={seed}\nsource={source}");
                let _ = writeln!(s, "duration={}\nmics={}\nspacing={}\ndoa_deg={}", cfg.duration, cfg.mics, cfg.spacing, cfg.doa_deg);
                let idoa = cfg.interferer_doa_deg.map_or("none".to_string(), |v| v.to_string());
                let _ = writeln!(s, "interferer_doa_deg={idoa}\nsir_db={}\nsnr_db={}", cfg.sir_db, cfg.snr_db);
                let tail = cfg.tail_db.map_or("none".to_string(), |v| v.to_string());
                let _ = writeln!(s, "tail_rt60={}\ntail_db={tail}", cfg.tail_rt60);
                let _ = writeln!(s, "fft_len={}\nhop={}", frames.fft_len(), frames.hop());
            }
            SceneMeta::AecRecorded => s.push_str("kind=aec\nsource=wav\n"),
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let source = kv.get("source").cloned().unwrap_or_else(|| "speech".into());
        let opt_f64 = |kv: &BTreeMap<String, String>, key: &str| -> Result<Option<f64>> {
            match kv.req(key)?.as_str() {
                "none" => Ok(None),
                v => v.parse().map(Some).map_err(|_| Error::Config(format!("{key}: bad number {v:?}"))),
            }
        };
        match kv.req("kind")?.as_str() {
            "aec" if source == "wav" => Ok(SceneMeta::AecRecorded),
            "aec" => Ok(SceneMeta::Aec {
                seed: kv.num("seed")?,
                source,
                cfg: AecSceneConfig {
                    duration: kv.num("duration")?,
                    ser_db: kv.num("ser_db")?,
                    snr_db: kv.num("snr_db")?,
                    rt60: kv.num("rt60")?,
                    nonlinear: kv.num("nonlinear")?,
                    double_talk: kv.num("double_talk")?,
                    near_start: kv.num("near_start")?,
                    far_gain_db: kv.num("far_gain_db")?,
                    noise: kv.num("noise")?,
                },
            }),
            "gsc" => Ok(SceneMeta::Gsc {
                seed: kv.num("seed")?,
                source,
                cfg: GscSceneConfig {
                    duration: kv.num("duration")?,
                    mics: kv.num("mics")?,
                    spacing: kv.num("spacing")?,
                    doa_deg: kv.num("doa_deg")?,
                    interferer_doa_deg: opt_f64(&kv, "interferer_doa_deg")?,
                    sir_db: kv.num("sir_db")?,
                    snr_db: kv.num("snr_db")?,
                    tail_rt60: kv.num("tail_rt60")?,
                    tail_db: opt_f64(&kv, "tail_db")?,
                },
                frames: FrameConfig::new(kv.num("fft_len")?, kv.num("hop")?)?,
            }),
            other => Err(Error::Config(format!("unknown scene kind {other:?}"))),
        }
    }
}

fn source_kind(name: &str) -> Result<SourceKind> {
    match name {
        "speech" => Ok(SourceKind::Speech),
        "noise" => Ok(SourceKind::ModulatedNoise),
        other => Err(Error::Config(format!("scene source {other:?} cannot be regenerated"))),
    }
}

/// A scene of either task.
#[derive(Clone, Debug, PartialEq)]
pub enum Scene {
    Aec(AecScene),
    Gsc(GscScene),
}

/// Writes `meta.txt` and the WAV files of a generated scene.
pub fn write_scene_dir(dir: impl AsRef<Path>, meta: &SceneMeta, scene: &Scene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.txt"), meta.to_text())?;
    let f = WavFormat::Float32;
    match scene {
        Scene::Aec(s) => {
            for (name, sig) in [("u", &s.u), ("d", &s.d), ("s", &s.s), ("n", &s.n), ("d_u", &s.d_u), ("w", &s.w)] {
                wav::write(dir.join(format!("{name}.wav")), &[sig], f)?;
            }
        }
        Scene::Gsc(s) => {
            let mics = dir.join("mics");
            fs::create_dir_all(&mics)?;
            for (m, sig) in s.mics.iter().enumerate() {
                wav::write(mics.join(format!("{m}.wav")), &[sig], f)?;
            }
            wav::write(dir.join("s.wav"), &[&s.target], f)?;
            let views: Vec<&[f64]> = s.interferer_images.iter().map(Vec::as_slice).collect();
            wav::write(dir.join("interferer.wav"), &views, f)?;
            let views: Vec<&[f64]> = s.noise.iter().map(Vec::as_slice).collect();
            wav::write(dir.join("n.wav"), &views, f)?;
        }
    }
    Ok(())
}

/// Loads a scene directory, regenerating synthetic scenes from metadata.
pub fn read_scene_dir(dir: impl AsRef<Path>) -> Result<(SceneMeta, Scene)> {
    let dir = dir.as_ref();
    let meta = SceneMeta::parse(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let scene = match &meta {
        SceneMeta::Aec { seed, source, cfg } => Scene::Aec(gen_aec_scene(*seed, cfg, &source_kind(source)?)?),
        SceneMeta::Gsc { seed, source, cfg, frames } => {
            Scene::Gsc(gen_gsc_scene(*seed, cfg, &source_kind(source)?, *frames)?)
        }
        SceneMeta::AecRecorded => {
            let u = wav::read_mono(dir.join("u.wav"))?;
            let d = wav::read_mono(dir.join("d.wav"))?;
            if u.len() != d.len() {
                return Err(Error::Shape("u.wav and d.wav differ in length".into()));
            }
            let optional = |name: &str| -> Result<Vec<f64>> {
                let p = dir.join(format!("{name}.wav"));
                if p.exists() {
                    wav::read_mono(p)
                } else {
                    Ok(vec![0.0; u.len()])
                }
            };
            let (d_u, s, n) = (optional("d_u")?, optional("s")?, optional("n")?);
            Scene::Aec(AecScene {
                seed: 0,
                cfg: AecSceneConfig {
                    duration: u.len() as f64 / crate::signal::SAMPLE_RATE as f64,
                    ..AecSceneConfig::default()
                },
                u,
                d,
                d_u,
                s,
                n,
                w: Vec::new(),
            })
        }
    };
    Ok((meta, scene))
}
