//! Rollouts, advantage estimation, losses and the PPO loop.

pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod rollout;
pub mod trainer;

pub use config::TrainConfig;
pub use gradcheck::{check_gradient, GradCheck};
pub use loss::{build_losses, decoder_loss, encoder_loss, ranking_loss, LossSettings, LossTerms, Minibatch};
pub use rollout::{gae, RolloutBatch, Transition};
pub use trainer::{env_rng, IterationMetrics, Trainer};
