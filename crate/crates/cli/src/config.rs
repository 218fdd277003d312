//! The run configuration document.
//!
//! ```toml
//! [data]    # synthetic benchmark (gen-data)
//! [model]   # architecture
//! [train]   # optimization, episodes, loss weights
//! [eval]    # adaptation protocol: k, seed
//! ```
//!
//! Every section and key is optional; missing keys take their defaults and
//! unknown keys are rejected. The effective document is written to each run
//! directory as `config.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vdpg_core::data::{SyntheticConfig, Task};
use vdpg_core::model::ModelConfig;
use vdpg_core::trainer::{EvalProtocol, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::synthetic(),
            eval: EvalProtocol::default(),
        }
    }
}

impl RunConfig {
    /// d=8, Z=3, two heads, three classes, l=4.
    pub fn toy() -> Self {
        Self {
            data: SyntheticConfig {
                d: 8,
                l: 4,
                num_classes: 3,
                num_source_domains: 3,
                num_target_domains: 2,
                samples_per_domain: 40,
                ..SyntheticConfig::default()
            },
            model: ModelConfig {
                d: 8,
                bank_size: 3,
                num_heads: 2,
                num_classes: 3,
                task: Task::Classification,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    /// `None` gives the defaults; `toy` names the built-in toy preset.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) if p.as_os_str() == "toy" => Ok(Self::toy()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.data.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
