//! Single writer for a run's artifacts: CSV tables, JSON reports and
//! GridField binaries under one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anosov_core::{Error, GridField, Result};
use serde::Serialize;
use serde_json::Value;

/// An asserted quantity: passes when `value ≤ tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    /// `value ≥ bound`, reported as a lower bound.
    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance: bound,
            passed: value >= bound,
        }
    }

    /// A yes/no condition, recorded as value 0 (holds) or 1 (fails).
    pub fn holds(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        }
    }
}

pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Files written so far, in order.
    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
        w.write_record(header).map_err(|e| io(&path, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| io(&path, e))?;
        }
        w.flush().map_err(|e| io(&path, e))
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io(&path, e))
    }

    pub fn grid(&mut self, name: &str, field: &GridField) -> Result<()> {
        let path = self.path(name);
        field.save(&path)
    }
}

/// Shortest round-trip decimal form, so tables are reproducible bit for bit.
pub fn num(v: f64) -> String {
    format!("{v}")
}
