//! Experiment configuration, loadable from TOML.
//!
//! Every section has defaults, so an empty file describes the standard
//! fixture: one target, three helpful sources that share its signal tokens
//! and three conflicting sources that use the same tokens with the class
//! mapping rotated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::testbed::{FamilySpec, ModelConfig, PromptTuneConfig, TaskSpec};
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub family: FamilySpec,
    /// Id of the task that stage 2 trains; every other task is a source.
    pub target: String,
    pub prompt_len: usize,
    /// Standard deviation of the Gaussian prompt initialization.
    pub init_std: f64,
    pub stage1: PromptTuneConfig,
    pub transfer: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            family: standard_family(),
            target: "target".into(),
            prompt_len: 8,
            init_std: 0.5,
            stage1: PromptTuneConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

/// Target plus three helpful and three conflicting sources, all drawn from
/// one signal group. Sources alternate between the two kinds.
pub fn standard_family() -> FamilySpec {
    let task = |id: &str, polarity: i8| TaskSpec {
        id: id.into(),
        group: "g0".into(),
        polarity,
        share: 1.0,
    };
    FamilySpec {
        tasks: vec![
            task("target", 1),
            task("help0", 1),
            task("conf0", -1),
            task("help1", 1),
            task("conf1", -1),
            task("help2", 1),
            task("conf2", -1),
        ],
        ..FamilySpec::default()
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.stage1.validate()?;
        self.transfer.validate()?;
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len must be positive"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("init_std must be nonnegative"));
        }
        if !self.family.tasks.iter().any(|t| t.id == self.target) {
            return Err(Error::config(format!("target {:?} is not in the task family", self.target)));
        }
        Ok(())
    }
}
