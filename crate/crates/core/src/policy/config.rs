use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::policy::ordering::StrategyKind;

fn default_d_model() -> usize {
    64
}

fn default_heads() -> usize {
    1
}

fn default_blocks() -> usize {
    1
}

/// Network shape. Stored as JSON next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Blocks in each of the encoder and decoder.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    /// Let the ranking loss backpropagate into the encoder.
    #[serde(default)]
    pub scoring_grad_to_encoder: bool,
}

fn default_strategy() -> StrategyKind {
    StrategyKind::LearnedPl
}

impl ModelConfig {
    pub fn new(n_agents: usize, obs_dim: usize, n_actions: usize) -> Self {
        Self {
            n_agents,
            obs_dim,
            n_actions,
            d_model: default_d_model(),
            heads: default_heads(),
            blocks: default_blocks(),
            strategy: default_strategy(),
            scoring_grad_to_encoder: false,
        }
    }

    /// Returns the offending field name alongside the message.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.n_agents == 0 {
            return Err(("n_agents", "must be at least 1".into()));
        }
        if self.obs_dim == 0 {
            return Err(("obs_dim", "must be at least 1".into()));
        }
        if self.n_actions == 0 {
            return Err(("n_actions", "must be at least 1".into()));
        }
        if self.d_model == 0 {
            return Err(("d_model", "must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(("heads", format!("must divide d_model {}", self.d_model)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self.check() {
            Ok(()) => Ok(()),
            Err((field, msg)) => arg_err(format!("model.{field}: {msg}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"n_agents":3,"obs_dim":4,"n_actions":3}"#).unwrap();
        assert_eq!(c, ModelConfig::new(3, 4, 3));
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"n_agents":3,"obs_dim":4,"n_actions":3,"x":1}"#).is_err());
    }

    #[test]
    fn invalid_heads() {
        let mut c = ModelConfig::new(2, 2, 2);
        c.heads = 3;
        assert_eq!(c.check().unwrap_err().0, "heads");
        assert!(c.validate().is_err());
    }
}
