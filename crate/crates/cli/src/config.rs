//! Structured run configuration. Every section has sensible defaults, so a
//! config file only needs the keys it wants to change.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tamperloc_core::dssn::DSSNConfig;
use tamperloc_core::mae::{MAEConfig, PretrainConfig};
use tamperloc_core::pipeline::TrainConfig;
use tamperloc_core::synth::GenSpec;
use tamperloc_core::tapi::PromptEncoderConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mae: MAEConfig,
    pub dssn: DSSNConfig,
    pub prompt: PromptEncoderConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub gen: GenSpec,
    pub jpeg_levels: Vec<u32>,
    pub blur_levels: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mae: MAEConfig::default(),
            dssn: DSSNConfig::default(),
            prompt: PromptEncoderConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            gen: GenSpec::default(),
            jpeg_levels: vec![100, 90, 80, 70, 60, 50],
            blur_levels: vec![0, 3, 7, 11, 15, 19],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("cannot parse {}", p.display()))
            }
        }
    }

    /// Propagate one global seed to every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.pretrain.seed = seed;
        self.gen.seed = seed;
    }
}
