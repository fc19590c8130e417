//! Checkpoint files.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "format": "dualview-checkpoint",
//!   "version": 1,
//!   "config_hash": "<sha256 of the training config>",
//!   "state": {
//!     "config": { ... },          training configuration
//!     "epoch": 41,                last completed epoch
//!     "best_val_dsc": 0.93,
//!     "seg_params": [[...], [...]],   original-view and high-frequency-view networks
//!     "critic_params": [...],
//!     "seg_opt": [{...}, {...}],      SGD momentum buffers
//!     "critic_opt": {...}             AdamW moments and step count
//!   }
//! }
//! ```
//!
//! Loading fails when the stored hash does not match the stored config, or
//! when the caller expects a different config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use dualview_core::pipeline::{Checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{CliError, Result};

pub const FORMAT: &str = "dualview-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config_hash: String,
    state: Checkpoint,
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config_hash: config_hash(&ck.config),
        state: ck.clone(),
    };
    let out = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a checkpoint; with `expected`, also requires its config to match.
pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(CliError::Checkpoint(format!(
            "{}: unsupported format {} version {}",
            path.display(),
            file.format,
            file.version
        )));
    }
    let stored = config_hash(&file.state.config);
    if stored != file.config_hash {
        return Err(CliError::Checkpoint(format!(
            "{}: config hash {} does not match its config ({stored})",
            path.display(),
            file.config_hash
        )));
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != stored {
            return Err(CliError::Checkpoint(format!(
                "{}: trained with config {stored}, current config is {want}",
                path.display()
            )));
        }
    }
    Ok(file.state)
}
