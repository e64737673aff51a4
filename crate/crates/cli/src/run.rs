use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use wla::griddata::{Archive, GridField, NormStats, PvsMeta};
use wla::model::WlaConfig;
use wla::pvum::PvumConfig;
use wla::vaeformer::{PatchConfig, StackConfig};

use crate::args::{Patch, Preset};

pub const RUN_CONFIG: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] wla::Error),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot: {0}")]
    Plot(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// The exact invocation that produced a directory's artifacts.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, A: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub threads: usize,
    pub args: &'a A,
}

/// Creates `dir` and writes the run configuration into it.
pub fn start_run<A: Serialize>(dir: &Path, command: &str, args: &A) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let cfg = RunConfig { command, version: env!("CARGO_PKG_VERSION"), threads: rayon::current_num_threads(), args };
    fs::write(dir.join(RUN_CONFIG), serde_json::to_string_pretty(&cfg)?)?;
    Ok(())
}

/// `a..b` (half-open).
pub fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if b <= a {
        return Err(format!("empty range {s}"));
    }
    Ok(a..b)
}

pub fn patch_config(p: Patch) -> PatchConfig {
    match p {
        Patch::Era5 => PatchConfig::era5(),
        Patch::Desk => PatchConfig::desk(),
    }
}

pub fn model_config(preset: Preset, meta: PvsMeta, height: usize, width: usize, nb: usize, seed: u64) -> WlaConfig {
    let mut cfg = match preset {
        Preset::Toy => WlaConfig::toy(meta),
        Preset::Desk => WlaConfig::desk(meta),
        Preset::Tiny => {
            let mut c = WlaConfig::desk(meta);
            c.stack = StackConfig { encoder_depth: 1, decoder_depth: 2, d_model: 16, heads: 2, mlp_ratio: 2 };
            c.pvum = PvumConfig { d: 8, blocks: 1, heads: 2, c2: 4, mlp_ratio: 2 };
            c
        }
    };
    cfg.height = height;
    cfg.width = width;
    cfg.nb = nb;
    cfg.seed = seed;
    cfg
}

/// Fields of `meta` at `range` (or every stored step).
pub fn load_fields(archive: &dyn Archive, meta: &PvsMeta, range: Option<&Range<u64>>) -> CliResult<Vec<GridField>> {
    let times: Vec<u64> = match range {
        Some(r) => r.clone().collect(),
        None => archive.times(),
    };
    if times.is_empty() {
        return Err(usage("no fields selected from the archive"));
    }
    Ok(times.into_iter().map(|t| wla::griddata::select_subset(archive, meta, t)).collect::<Result<_, _>>()?)
}

pub fn normalize_all(norm: &NormStats, fields: &[GridField]) -> CliResult<Vec<GridField>> {
    Ok(fields.iter().map(|f| norm.normalize(f)).collect::<Result<_, _>>()?)
}

pub fn write_csv_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

/// 5% of the run, kept strictly inside it.
pub fn default_warmup(steps: u64) -> u64 {
    (steps / 20).clamp(1, steps.saturating_sub(1).max(1))
}
