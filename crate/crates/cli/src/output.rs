use std::fs;
use std::io::Write;
use std::path::Path;

use darboux::Error;
use serde::Serialize;
use serde_json::{json, Value};
use tempfile::NamedTempFile;

use crate::config::ExperimentConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_DEGENERATE: u8 = 2;
pub const EXIT_DOMAIN: u8 = 3;
pub const EXIT_VERIFICATION: u8 = 4;

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Degenerate { .. } => EXIT_DEGENERATE,
        Error::Domain { .. } => EXIT_DOMAIN,
        Error::DimensionMismatch { .. } | Error::Input(_) | Error::Parse(_) | Error::Io(_) => EXIT_INPUT,
    }
}

pub fn error_json(err: &Error) -> Value {
    let kind = match err {
        Error::Degenerate { .. } => "degenerate",
        Error::Domain { .. } => "domain",
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::Input(_) => "input",
        Error::Parse(_) => "parse",
        Error::Io(_) => "io",
    };
    let mut v = json!({ "kind": kind, "message": err.to_string() });
    match err {
        Error::Degenerate {
            sigma_min,
            margin,
            t,
            s,
            point,
        } => {
            v["sigma_min"] = json!(sigma_min);
            v["margin"] = json!(margin);
            v["t"] = json!(t);
            v["s"] = json!(s);
            v["point"] = json!(point);
        }
        Error::Domain { t, point, .. } => {
            v["t"] = json!(t);
            v["point"] = json!(point);
        }
        _ => {}
    }
    v
}

/// What a command produced: the structured result, an optional CSV table
/// and whether its verification passed.
pub struct Outcome {
    pub result: Value,
    pub csv: Option<String>,
    pub passed: bool,
    pub summary: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn report(config: &ExperimentConfig, status: &str, body: (&str, Value), warnings: &[String]) -> String {
    let mut v = json!({
        "command": config.command,
        "status": status,
        "config": config,
        "warnings": warnings,
    });
    v[body.0] = body.1;
    let mut s = serde_json::to_string_pretty(&v).expect("plain data");
    s.push('\n');
    s
}

/// Writes `name` under `dir` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("plain data")
}

/// `{:.16e}`: 17 significant digits.
pub fn sci(x: f64) -> String {
    format!("{x:.16e}")
}
