//! Checkpoint directories: one state file per iteration plus an index.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::iterate::Convergence;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::types::IterationState;

pub const CHECKPOINT_FORMAT: &str = "loopseg-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: PipelineConfig,
    /// Dataset directory as given by the caller.
    pub dataset: Option<String>,
    pub iterations: Vec<u32>,
    pub latest: u32,
    pub outcome: Option<Convergence>,
}

pub struct CheckpointDir {
    root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn state_path(&self, t: u32) -> PathBuf {
        self.root.join(format!("state_{t:04}.json"))
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().is_file()
    }

    pub fn manifest(&self) -> Result<CheckpointManifest> {
        let m: CheckpointManifest = read_json(&self.manifest_path())?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                m.format
            )));
        }
        Ok(m)
    }

    pub fn load_state(&self, t: u32) -> Result<IterationState> {
        let s: IterationState = read_json(&self.state_path(t))?;
        if s.iteration != t {
            return Err(Error::Format(format!(
                "{} holds iteration {}",
                self.state_path(t).display(),
                s.iteration
            )));
        }
        Ok(s)
    }

    pub fn latest(&self) -> Result<(CheckpointManifest, IterationState)> {
        let m = self.manifest()?;
        let s = self.load_state(m.latest)?;
        Ok((m, s))
    }

    /// Write the state, then the index pointing at it. A crash between the
    /// two leaves the previous index valid.
    pub fn save(
        &self,
        state: &IterationState,
        config: &PipelineConfig,
        dataset: Option<&str>,
        outcome: Option<Convergence>,
    ) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        write_json(&self.state_path(state.iteration), state)?;
        let mut iterations = if self.exists() {
            self.manifest()?.iterations
        } else {
            Vec::new()
        };
        iterations.retain(|&t| t < state.iteration);
        iterations.push(state.iteration);
        let m = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config: config.clone(),
            dataset: dataset.map(str::to_string),
            iterations,
            latest: state.iteration,
            outcome,
        };
        write_json(&self.manifest_path(), &m)
    }

    /// Record the stopping outcome without touching the states.
    pub fn set_outcome(&self, outcome: Convergence) -> Result<()> {
        let mut m = self.manifest()?;
        m.outcome = Some(outcome);
        write_json(&self.manifest_path(), &m)
    }
}
