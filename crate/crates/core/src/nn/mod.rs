//! Minimal reverse-mode differentiable compute for the policy network.

pub mod adam;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig, StepStats};
pub use layers::{attention_forward, block_forward, dense_forward, Block, Dense, LayerNorm, Mlp, ParamBuilder, SelfAttention};
pub use params::{ParamId, ParameterStore, Segment, CHECKPOINT_VERSION};
pub use tape::{AttentionMask, Gradients, Tape, Var};
pub use tensor::Tensor;
