use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use graphfed_core::downstream::SummaryRow;
use graphfed_core::{Error, ErrorCategory, Result};
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::config::ExperimentConfig;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("output directory {} is locked by another run (remove {} if that run is gone)", .0.display(), .0.join(LOCK_NAME).display())]
    Locked(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
                ErrorCategory::Internal => 1,
            },
            CliError::Locked(_) => 1,
        }
    }
}

pub const LOCK_NAME: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> std::result::Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(out.to_path_buf())),
            Err(e) => Err(Error::io(&path, e).into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    /// `git describe` of the working directory, when available.
    pub git: Option<String>,
    pub config: ExperimentConfig,
    pub summaries: Vec<SummaryRow>,
    /// Artifact name to path, relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git: git_stamp(),
            config: config.clone(),
            summaries: Vec::new(),
            artifacts: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Writes `report_<command>.json` and the resolved `config_<command>.toml`.
    pub fn write(&mut self, out: &Path) -> Result<PathBuf> {
        let cfg = format!("config_{}.toml", self.command);
        write_text(&out.join(&cfg), &self.config.to_toml()?)?;
        self.artifacts.insert("config".into(), cfg.into());
        let path = out.join(format!("report_{}.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::contract(e.to_string()))?;
        write_text(&path, &text)?;
        Ok(path)
    }
}

fn git_stamp() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn append_text(path: &Path, text: &str) -> Result<()> {
    let mut f: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn ndjson<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("plain data serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        let b = OutputLock::acquire(dir.path());
        assert!(matches!(b, Err(CliError::Locked(_))));
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::Validation("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::numeric("c", 0, "nan")).exit_code(), 4);
        assert_eq!(CliError::from(Error::contract("x")).exit_code(), 1);
    }
}
