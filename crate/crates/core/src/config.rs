//! Run configuration shared by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::pretrain::PretrainConfig;
use crate::signal::DatasetSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub n: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig { n: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Overrides the per-check default trial count where the check has one.
    pub trials: Option<usize>,
}

/// Every field has a default and unknown keys are rejected. Command-line
/// flags take precedence over values read from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_level: String,
    pub synth: DatasetSpec,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub fewshot: FewShotConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            log_level: "info".into(),
            synth: DatasetSpec::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            fusion: FusionConfig::default(),
            fewshot: FewShotConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse JSON text; errors name the offending key with line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}
