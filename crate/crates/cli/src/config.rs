//! The run configuration: one JSON document whose sections mirror the
//! library's config types. Command-line flags override individual fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stormdec::decode::DecodeOptions;
use stormdec::net::TrainerConfig;
use stormdec::synth::TaskParams;
use stormdec::{DecodeSchedule, ModelConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskParams,
    pub schedule: Option<DecodeSchedule>,
    pub training: TrainerConfig,
    pub decode: DecodeOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
            }
        }
    }

    /// The configuration actually used, with the seed, for provenance.
    pub fn echo(&self, seed: u64) -> serde_json::Value {
        serde_json::json!({ "seed": seed, "config": self })
    }
}
