//! Run manifests: the resolved command, seeds, version stamp, timestamps
//! and artifact paths, written before a command does any work.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::Command;
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Started,
    Completed,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Version {
    pub package: String,
    pub git: Option<String>,
}

impl Version {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_VERSION").to_string(),
            git: option_env!("FNRI_GIT_REV").map(str::to_string),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// The fully resolved command; `fnri rerun` replays exactly this.
    pub run: Command,
    pub seeds: Value,
    pub version: Version,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: Status,
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
    /// Produced by `rerun` from this earlier manifest.
    pub rerun_of: Option<PathBuf>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(run: Command, seeds: Value, artifacts: Vec<PathBuf>) -> Self {
        Self {
            run,
            seeds,
            version: Version::current(),
            started_at: now(),
            finished_at: None,
            status: Status::Started,
            error: None,
            artifacts,
            rerun_of: None,
        }
    }

    pub fn finish(&mut self, outcome: Result<(), String>) {
        self.finished_at = Some(now());
        match outcome {
            Ok(()) => self.status = Status::Completed,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e);
            }
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
