use std::path::PathBuf;
use std::process::ExitCode;

use afopt::config::{parse_kv, RunConfig};
use afopt::Error;
use afopt_cli::{cmd_bench, cmd_eval, cmd_generate, cmd_train, exit_code};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afopt", version, about = "Adaptive filters with learned multi-step optimizers")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes into --scenes.
    Generate(Common),
    /// Train a learned optimizer on --scenes; writes best.ckpt to --out.
    Train(Common),
    /// Evaluate one optimizer on --scenes.
    Eval(Common),
    /// Evaluate every size x mode x loss checkpoint under --ckpt.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Base configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// aec or gsc.
    #[arg(long)]
    task: Option<String>,
    /// S, M, L or a baseline: nlms, kf, rls, null.
    #[arg(long)]
    size: Option<String>,
    /// P, PU or PUx<C>.
    #[arg(long)]
    mode: Option<String>,
    /// sup, unsup or sisdr (sup resolves to the supervised loss of the task).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> afopt::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_text(&std::fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("task", self.task.clone()),
            ("optimizer", self.size.clone()),
            ("mode", self.mode.clone()),
            ("loss", self.loss.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("scenes", self.scenes.as_ref().map(|p| p.display().to_string())),
            ("ckpt", self.ckpt.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let map = parse_kv(kv)?;
            if map.is_empty() {
                return Err(Error::Config(format!("--set expects key=value, got {kv:?}")));
            }
            cfg.apply(&map)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> afopt::Result<()> {
    match cli.cmd {
        Command::Generate(c) => {
            let dirs = cmd_generate(&c.resolve()?)?;
            println!("generated {} scenes", dirs.len());
        }
        Command::Train(c) => {
            let s = cmd_train(&c.resolve()?)?;
            println!("{}", serde_json::to_string_pretty(&s).unwrap_or_default());
        }
        Command::Eval(c) => {
            let r = cmd_eval(&c.resolve()?)?;
            println!("{}", serde_json::to_string_pretty(&r).unwrap_or_default());
        }
        Command::Bench(c) => {
            let rows = cmd_bench(&c.resolve()?)?;
            for r in rows.iter().filter(|r| !r.monotone) {
                println!("non-monotone: {}.{}.{} scores {:?}", r.size, r.loss, r.mode, r.metric);
            }
            println!("{} cells, {} missing", rows.len(), rows.iter().filter(|r| r.metric.is_none()).count());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
