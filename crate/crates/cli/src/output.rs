//! Output files with provenance: CSV files start with a `#` comment row and
//! JSON documents carry a `_meta` object, both naming the command, the config
//! hash and the seed.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new<T: Serialize>(command: &str, cfg: &T, seed: u64) -> Self {
        Provenance {
            command: command.to_string(),
            config_sha256: config_hash(cfg),
            seed,
        }
    }

    pub fn csv_header(&self) -> String {
        format!(
            "# setpose {} config_sha256={} seed={}\n",
            self.command, self.config_sha256, self.seed
        )
    }

    pub fn write_csv(&self, path: &Path, body: &str) -> CliResult<()> {
        write_file(path, &format!("{}{body}", self.csv_header()))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> CliResult<()> {
        let mut doc = serde_json::to_value(value).expect("output serializes");
        let meta = serde_json::to_value(self).expect("provenance serializes");
        match &mut doc {
            serde_json::Value::Object(map) => {
                map.insert("_meta".into(), meta);
            }
            other => {
                let inner = std::mem::take(other);
                *other = serde_json::json!({ "_meta": meta, "data": inner });
            }
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("output serializes");
        text.push('\n');
        write_file(path, &text)
    }
}

pub fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a JSON document written by [`Provenance::write_json`], dropping `_meta`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mismatch = |e: serde_json::Error| CliError::SchemaMismatch {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut doc: serde_json::Value = serde_json::from_str(&text).map_err(mismatch)?;
    if let serde_json::Value::Object(map) = &mut doc {
        map.remove("_meta");
    }
    serde_json::from_value(doc).map_err(mismatch)
}

/// Reads the provenance of a JSON document, if it has one.
pub fn read_provenance(path: &Path) -> CliResult<Option<Provenance>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::SchemaMismatch {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(doc
        .get("_meta")
        .and_then(|m| serde_json::from_value(m.clone()).ok()))
}

/// Formats a float for CSV; non-finite values become `inf`/`nan`, empty for `None`.
pub fn csv_float(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        Some(x) if x.is_nan() => "nan".into(),
        Some(x) if x > 0.0 => "inf".into(),
        Some(_) => "-inf".into(),
        None => String::new(),
    }
}

/// Progress messages on stderr, silenced by `--quiet`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Reporter {
    pub quiet: bool,
}

impl Reporter {
    pub fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Always printed.
    pub fn warn(&self, msg: impl AsRef<str>) {
        eprintln!("warning: {}", msg.as_ref());
    }
}
