//! Command-line surface: data generation, two-stage training, rollout,
//! evaluation, rendering and gradient checks.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 divergence, 5 data mismatch,
//! 6 check failure.

mod commands;
mod data;
mod render;

#[cfg(test)]
mod tests;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_bool, parse_config, render_config, ConfigMap};
use crate::error::Error;
use crate::tokenizer::TokenizerConfig;
use crate::worldmodel::WorldConfig;

pub use data::{split_of, DatasetEntry, Manifest, Split};
pub use render::{render_bev, Palette, Rgb};

/// A command failure carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("data mismatch: {0}")]
    Mismatch(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Mismatch(_) => 5,
            CliError::Check(_) => 6,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => CliError::Usage(msg),
            Error::Io(_) | Error::Format(_) | Error::Truncated { .. } => CliError::Io(msg),
            Error::Divergence(_) | Error::NonFinite(_) => CliError::Divergence(msg),
            Error::Shape { .. } | Error::Validation(_) | Error::Length(_) => CliError::Mismatch(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "occworld", version, about = "Occupancy world model: tokenizer, world model, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub(crate) struct Common {
    /// Plain-text key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set run.deterministic=true`.
    #[arg(long)]
    deterministic: bool,
    #[arg(skip)]
    invocation: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of `.occseq` files and a manifest.
    GenData(commands::GenDataArgs),
    /// Stage 1: train the scene tokenizer.
    TrainTokenizer(commands::TrainTokenizerArgs),
    /// Stage 2: train the world model on frozen-tokenizer tokens.
    TrainWorld(commands::TrainWorldArgs),
    /// Forecast future frames and the ego trajectory from a history window.
    Rollout(commands::RolloutArgs),
    /// Forecasting and planning reports with the Copy&Paste baseline.
    Eval(commands::EvalArgs),
    /// Render a frame as a top-down PPM image.
    Render(commands::RenderArgs),
    /// Finite-difference checks of every primitive and a tiny world model.
    Gradcheck(commands::GradcheckArgs),
}

/// Global `run.*` keys.
pub const RUN_KEYS: &[&str] = &["run.seed", "run.deterministic", "run.out_dir"];

fn known_key(k: &str) -> bool {
    RUN_KEYS.contains(&k) || TokenizerConfig::KEYS.contains(&k) || WorldConfig::KEYS.contains(&k)
}

/// The merged configuration of one invocation.
#[derive(Clone, Debug, Default)]
pub(crate) struct RunConfig {
    pub map: ConfigMap,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
    /// The command line, recorded in snapshots.
    pub invocation: String,
}

impl RunConfig {
    pub fn resolve(common: &Common) -> CliResult<Self> {
        let invocation = common.invocation.clone();
        let mut map = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                parse_config(&text)?
            }
            None => ConfigMap::new(),
        };
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(s) = common.seed {
            map.insert("run.seed".into(), s.to_string());
        }
        if common.deterministic {
            map.insert("run.deterministic".into(), "true".into());
        }
        let unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !known_key(k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let seed = match map.get("run.seed") {
            Some(v) => Some(
                v.parse()
                    .map_err(|_| CliError::Usage(format!("run.seed={v}: expected an integer")))?,
            ),
            None => None,
        };
        let deterministic = match map.get("run.deterministic") {
            Some(v) => parse_bool("run.deterministic", v)?,
            None => false,
        };
        let out_dir = map.get("run.out_dir").map(PathBuf::from);
        Ok(RunConfig {
            map,
            seed,
            deterministic,
            out_dir,
            invocation,
        })
    }

    /// `--out` if given, else `run.out_dir`.
    pub fn output(&self, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
        flag.clone()
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| CliError::Usage("an output location is required (--out or run.out_dir)".into()))
    }

    /// Worker threads: 1 in deterministic mode, else `OCCWORLD_THREADS`
    /// (default: available parallelism).
    pub fn threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
        match std::env::var("OCCWORLD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(n) if n > 0 => n,
            _ => avail,
        }
    }

    pub fn tokenizer_config(&self) -> CliResult<TokenizerConfig> {
        let mut c = TokenizerConfig::from_map(&self.map)?;
        if let (Some(s), false) = (self.seed, self.map.contains_key("tokenizer.seed")) {
            c.seed = s;
        }
        Ok(c)
    }

    pub fn world_config(&self) -> CliResult<WorldConfig> {
        let mut c = WorldConfig::from_map(&self.map)?;
        if let (Some(s), false) = (self.seed, self.map.contains_key("world.seed")) {
            c.seed = s;
        }
        Ok(c)
    }
}

/// Writes the resolved configuration (explicit keys plus `extra`) so a run
/// can be repeated exactly.
pub(crate) fn write_snapshot(path: &Path, run: &RunConfig, extra: &ConfigMap) -> CliResult<()> {
    let mut m = run.map.clone();
    m.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    let text = format!("# resolved configuration\n# command: {}\n{}", run.invocation, render_config(&m));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let invocation = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let mut cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let msg = e.render().to_string();
            return Err(CliError::Usage(msg.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    let common = match &mut cli.command {
        Command::GenData(a) => &mut a.common,
        Command::TrainTokenizer(a) => &mut a.common,
        Command::TrainWorld(a) => &mut a.common,
        Command::Rollout(a) => &mut a.common,
        Command::Eval(a) => &mut a.common,
        Command::Render(a) => &mut a.common,
        Command::Gradcheck(a) => &mut a.common,
    };
    common.invocation = format!("occworld {invocation}");
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::TrainTokenizer(a) => commands::train_tokenizer(&a),
        Command::TrainWorld(a) => commands::train_world(&a),
        Command::Rollout(a) => commands::rollout(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Render(a) => commands::render(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

/// Entry point for the binary: runs and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
