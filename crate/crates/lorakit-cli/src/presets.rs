//! Named architecture presets for the budget calculators.
//!
//! These describe the published model shapes whose trainable-parameter
//! counts the budget module reproduces; nothing here instantiates live
//! weights.

use lorakit_core::model::ModelConfig;
use lorakit_core::CoreError;

use crate::error::{CliError, Result};

pub const PRESET_NAMES: [&str; 5] =
    ["toy", "gpt3-175b", "roberta-base", "roberta-large", "gpt2-medium"];

pub fn lookup(name: &str) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "gpt3-175b" => Ok(ModelConfig::new(96, 12288, 96, 50257, 2048)),
        "roberta-base" => Ok(ModelConfig::new(12, 768, 12, 50265, 512)),
        "roberta-large" => Ok(ModelConfig::new(24, 1024, 16, 50265, 512)),
        "gpt2-medium" => Ok(ModelConfig::new(24, 1024, 16, 50257, 1024)),
        other => Err(CliError::Core(CoreError::Config(format!(
            "unknown preset '{other}' (expected one of {})",
            PRESET_NAMES.join(", ")
        )))),
    }
}
