//! Encoder, scoring block and order-conditioned decoder.

pub mod config;
pub mod model;
pub mod ordering;

pub use config::ModelConfig;
pub use model::{DecoderOutput, EncoderOutput, JointActionRecord, ObservationRepresentation, Pmat};
pub use ordering::{select_order, DecisionCredits, Mode, OrderingStrategy, StrategyKind};
