//! Result files: JSON and CSV with numbers fixed at 12 significant digits,
//! plus the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const SIGNIFICANT_DIGITS: usize = 12;

/// Rounds to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().expect("formatted float parses")
}

/// Rounds every float in a JSON tree. Integers are left alone.
pub fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// One CSV cell.
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

fn render(c: &Cell) -> String {
    match c {
        Cell::Num(x) => {
            let r = round_sig(*x);
            if r != 0.0 && (r.abs() < 1e-4 || r.abs() >= 1e16) {
                format!("{r:e}")
            } else {
                r.to_string()
            }
        }
        Cell::Int(i) => i.to_string(),
        Cell::Text(s) => s.clone(),
    }
}

/// Collects the files a run writes so the manifest can list them.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutputDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        round_value(&mut v);
        self.write(name, serde_json::to_string_pretty(&v)? + "\n")
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<Cell>]) -> Result<PathBuf> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            text.push_str(&row.iter().map(render).collect::<Vec<_>>().join(","));
            text.push('\n');
        }
        self.write(name, text)
    }

    /// Writes without recording, for the manifest itself.
    pub fn write_unlisted(&self, name: &str, text: String) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn write(&mut self, name: &str, text: String) -> Result<PathBuf> {
        let path = self.write_unlisted(name, text)?;
        self.written.push(path.clone());
        Ok(path)
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: Value,
    pub version: String,
    pub spec_path: String,
    pub spec_sha256: String,
    pub seed: Option<u64>,
    pub workers: usize,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}
