//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{ModelConfig, OrderingStrategy};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub scoring_grad_to_encoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 1,
            blocks: 1,
            scoring_grad_to_encoder: false,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_strategy() -> OrderingStrategy {
    OrderingStrategy::learned()
}

fn default_eval_episodes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub total_env_steps: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Episodes of deterministic evaluation written to the summary.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub env: EnvSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_strategy")]
    pub strategy: OrderingStrategy,
}

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("<file>", e.message().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            config_err(if path == "." { "<root>".to_string() } else { path }, inner.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("<file>", e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_agents: self.env.n_agents,
            obs_dim: self.env.obs_dim(),
            n_actions: self.env.n_actions,
            d_model: self.model.d_model,
            heads: self.model.heads,
            blocks: self.model.blocks,
            strategy: self.strategy.kind,
            scoring_grad_to_encoder: self.model.scoring_grad_to_encoder,
        }
    }

    /// Range checks; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        if let Err((field, msg)) = self.env.validate() {
            return Err(config_err(format!("env.{field}"), msg));
        }
        if let Err((field, msg)) = self.model_config().check() {
            return Err(config_err(format!("model.{field}"), msg));
        }
        if let Err((field, msg)) = self.train.check() {
            return Err(config_err(format!("train.{field}"), msg));
        }
        if let Err(e) = self.strategy.validate(self.env.n_agents) {
            return Err(config_err("strategy.fixed_order", e.to_string()));
        }
        if self.total_env_steps == 0 {
            return Err(config_err("total_env_steps", "must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(config_err("eval_episodes", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::policy::StrategyKind;

    const MINIMAL: &str = r#"
total_env_steps = 400

[env]
kind = "key-agent-match"
n_agents = 3
n_actions = 3
"#;

    fn key(text: &str) -> String {
        match RunConfig::from_toml_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.env.kind, EnvKind::KeyAgentMatch);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.strategy.kind, StrategyKind::LearnedPl);
        assert_eq!(c.model_config().obs_dim, 4);
    }

    #[test]
    fn round_trip() {
        let text = format!(
            "{MINIMAL}\n[train]\ngamma = 0.5\nscoring_lr = 0.001\n\n[strategy]\nkind = \"fixed\"\nfixed_order = [2, 0, 1]\n"
        );
        let c = RunConfig::from_toml_str(&text).unwrap();
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.strategy.fixed_order.unwrap().as_slice(), &[2, 0, 1]);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key(&format!("{MINIMAL}\n[train]\ngamma = -0.1\n")), "train.gamma");
        assert_eq!(key(&format!("{MINIMAL}\n[train]\nbogus = 1\n")), "train.bogus");
        assert_eq!(key(&format!("{MINIMAL}\n[model]\nheads = 3\nd_model = 32\n")), "model.heads");
        assert_eq!(key(&format!("{MINIMAL}\n[strategy]\nkind = \"fixed\"\n")), "strategy.fixed_order");
        assert_eq!(key(&format!("{MINIMAL}\n[train]\nppo_epochs = \"ten\"\n")), "train.ppo_epochs");
        assert_eq!(key(&MINIMAL.replace("n_actions = 3", "n_actions = 1")), "env.n_actions");
        assert_eq!(key(&MINIMAL.replace("400", "0")), "total_env_steps");
        assert_eq!(key("total_env_steps = 1\nextra = 2\n[env]\nkind='joint-guess'\nn_agents=2\nn_actions=2\n"), "extra");
        assert_eq!(key("not toml ["), "<file>");
    }

    #[test]
    fn unknown_key_message_mentions_it() {
        let e = RunConfig::from_toml_str(&format!("{MINIMAL}\n[train]\nbogus = 1\n")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }
}
