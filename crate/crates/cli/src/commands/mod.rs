mod downstream;
mod pretrain;
mod synth;

use std::fs;
use std::path::Path;

use serde::Serialize;
use stfm::{Error, Result};

pub use downstream::{evaluate, finetune};
pub use pretrain::{grad_check, pretrain, reconstruct};
pub use synth::synth_data;

use crate::config::Config;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    code_version: &'a str,
    seed: u64,
    overrides: &'a [String],
    config: &'a Config,
}

/// `run.json` and `config.toml` go out before any work starts; the echoed
/// config reruns the command on its own.
pub fn write_run_manifest(out: &Path, command: &str, cfg: &Config, overrides: &[String]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_error(e, format!("creating {}", out.display())))?;
    let record = RunRecord {
        command,
        code_version: CODE_VERSION,
        seed: cfg.seed,
        overrides,
        config: cfg,
    };
    write_json(&out.join("run.json"), &record)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?.as_bytes())
}

pub fn io_error(source: std::io::Error, context: String) -> Error {
    Error::Io { context, source }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(e, format!("writing {}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: format!("encoding {}", path.display()),
        source: e,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| io_error(e, format!("reading {}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| Error::Json {
        context: format!("parsing {}", path.display()),
        source: e,
    })
}
