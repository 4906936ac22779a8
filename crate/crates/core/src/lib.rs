//! Plackett-Luce decision-order optimization for sequential multi-agent
//! policies.
//!
//! The crate contains the ranking distribution ([`pl`]), a small reverse-mode
//! autodiff engine ([`nn`]), the prioritized multi-agent transformer
//! ([`policy`]), PPO-style training ([`train`]), toy cooperative games
//! ([`envs`]) and exact tabular ground truth ([`oracle`]).

pub mod config;
pub mod error;
pub mod io;
pub mod nn;
pub mod pl;
pub mod run;
pub mod selfcheck;

pub use error::{Error, Result};
pub mod envs;
pub mod oracle;
pub mod policy;
pub mod train;
