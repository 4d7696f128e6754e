use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use super::transformer::transformer_forward;
use crate::error::Result;
use crate::numerics::Matrix;

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Logits for one sequence, one row per token.
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(transformer_forward(tokens, &self.params, &self.cfg)?.0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(&self.cfg, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg, params) = ModelParams::load(path)?;
        Ok(Self { cfg, params })
    }
}
