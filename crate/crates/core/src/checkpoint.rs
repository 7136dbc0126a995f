//! Versioned JSON checkpoints of the routing parameters and confidence stats.
//!
//! Floats are written in shortest round-trip decimal form, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::RunningStats;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::trainer::{Baseline, TrainerState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Completed training batches.
    pub step: u64,
    pub seed: u64,
    pub baseline: Baseline,
    pub params: PolicyParams,
    pub stats: RunningStats,
}

impl Checkpoint {
    pub fn from_state(state: &TrainerState, seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            step: state.step,
            seed,
            baseline: state.baseline,
            params: state.params.clone(),
            stats: state.stats.clone(),
        }
    }

    pub fn into_state(self) -> TrainerState {
        TrainerState {
            params: self.params,
            stats: self.stats,
            baseline: self.baseline,
            step: self.step,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.params
            .role
            .validate()
            .and_then(|_| ckpt.params.model.validate())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.params.role.dim() != ckpt.params.model.dim() {
            return Err(Error::Checkpoint(
                "role and model parameters disagree on embedding dim".into(),
            ));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_json()?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}
