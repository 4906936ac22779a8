use serde::{Deserialize, Serialize};

use crate::nn::AdamConfig;

/// PPO hyperparameters and rollout sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub num_minibatches: usize,
    pub lr: f64,
    /// Per-part overrides of `lr`.
    pub encoder_lr: Option<f64>,
    pub decoder_lr: Option<f64>,
    pub scoring_lr: Option<f64>,
    pub adam_eps: f64,
    pub entropy_coef: f64,
    pub ranking_loss_coef: f64,
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    /// Steps collected per environment per iteration.
    pub episode_length: usize,
    /// Parallel environment instances.
    pub rollout_threads: usize,
    /// OS threads used for collection. Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.05,
            ppo_epochs: 10,
            num_minibatches: 1,
            lr: 5e-4,
            encoder_lr: None,
            decoder_lr: None,
            scoring_lr: None,
            adam_eps: 1e-5,
            entropy_coef: 0.01,
            ranking_loss_coef: 1e-2,
            max_grad_norm: Some(10.0),
            normalize_advantages: true,
            episode_length: 25,
            rollout_threads: 8,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Returns the offending field name alongside the message.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        fn nonneg_finite(x: f64) -> bool {
            x.is_finite() && x >= 0.0
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(("gamma", format!("{} not in [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(("gae_lambda", format!("{} not in [0, 1]", self.gae_lambda)));
        }
        if !(self.clip_eps > 0.0) {
            return Err(("clip_eps", "must be positive".into()));
        }
        if self.ppo_epochs == 0 {
            return Err(("ppo_epochs", "must be at least 1".into()));
        }
        if self.num_minibatches == 0 {
            return Err(("num_minibatches", "must be at least 1".into()));
        }
        for (name, v) in [
            ("lr", Some(self.lr)),
            ("encoder_lr", self.encoder_lr),
            ("decoder_lr", self.decoder_lr),
            ("scoring_lr", self.scoring_lr),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err((name, format!("{v} must be positive")));
                }
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(("adam_eps", "must be positive".into()));
        }
        if !nonneg_finite(self.entropy_coef) {
            return Err(("entropy_coef", "must be non-negative".into()));
        }
        if !nonneg_finite(self.ranking_loss_coef) {
            return Err(("ranking_loss_coef", "must be non-negative".into()));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g.is_finite() && g > 0.0) {
                return Err(("max_grad_norm", "must be positive".into()));
            }
        }
        if self.episode_length == 0 {
            return Err(("episode_length", "must be at least 1".into()));
        }
        if self.rollout_threads == 0 {
            return Err(("rollout_threads", "must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(("workers", "must be at least 1".into()));
        }
        if self.num_minibatches > self.episode_length * self.rollout_threads {
            return Err(("num_minibatches", "exceeds the number of collected steps".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        let mut cfg = AdamConfig {
            lr: self.lr,
            eps: self.adam_eps,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        };
        for (group, lr) in [
            ("encoder", self.encoder_lr),
            ("decoder", self.decoder_lr),
            ("scoring", self.scoring_lr),
        ] {
            if let Some(lr) = lr {
                cfg.group_lr.insert(group.into(), lr);
            }
        }
        cfg
    }
}
