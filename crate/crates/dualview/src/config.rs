//! Run configuration file (TOML).
//!
//! Every table and key is optional and falls back to its default. Unknown
//! keys are rejected. Command-line flags override values from the file.

use std::path::{Path, PathBuf};

use dualview_core::pipeline::TrainConfig;
use dualview_core::synth::PhantomRanges;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::nifti_io::LabelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub phantom: PhantomRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 16, seed: 0, phantom: PhantomRanges::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `<case>_image.nii.gz` / `<case>_label.nii.gz` pairs.
    pub dir: Option<PathBuf>,
    /// Output directory of `train`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub labels: LabelMap,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// File name of the echoed effective configuration.
pub const ECHO_NAME: &str = "effective_config.toml";

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let line = line_of(text, span.start);
                    let source_line = text.lines().nth(line - 1).unwrap_or("");
                    let key = source_line.split('=').next().unwrap_or("").trim().trim_matches(['[', ']']);
                    CliError::Config(format!("{origin}: line {line}, key `{key}`: {message}"))
                }
                None => CliError::Config(format!("{origin}: {message}")),
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.labels.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the configuration into `dir` for provenance.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(path, e))
    }
}

/// SHA-256 of the canonical JSON form of a training configuration.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", "t").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.weights.lambda_m, 0.3);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let text = "[train]\nepochs = 5\nlearning_rate = 0.1\n";
        let err = RunConfig::parse(text, "run.toml").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn wrong_type_names_key_and_line() {
        let text = "[train]\n\nbatch_size = \"four\"\n";
        let err = RunConfig::parse(text, "run.toml").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("batch_size"), "{err}");
    }

    #[test]
    fn nested_tables_override_defaults() {
        let text = "[train.weights]\nlambda_c = 0.0\n[train.patch]\ntarget_shape = [32, 32, 32]\n";
        let cfg = RunConfig::parse(text, "t").unwrap();
        assert_eq!(cfg.train.weights.lambda_c, 0.0);
        assert_eq!(cfg.train.weights.lambda_m, 0.3);
        assert_eq!(cfg.train.patch.target_shape, [32; 3]);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 7;
        cfg.data.dir = Some("x".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml(), "echo").unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_config() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
