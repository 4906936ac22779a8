use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::pl::{pl_log_prob, pl_mode, pl_sample, OrderSample, Permutation, PreferenceLogits};

/// Per-agent preference scores produced by the scoring block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionCredits(pub PreferenceLogits);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Orders sampled from the Plackett-Luce distribution over credits.
    LearnedPl,
    /// A single configured order.
    Fixed,
    /// A fresh uniformly random order every step.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingStrategy {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_order: Option<Permutation>,
}

impl OrderingStrategy {
    pub fn learned() -> Self {
        Self {
            kind: StrategyKind::LearnedPl,
            fixed_order: None,
        }
    }

    pub fn fixed(order: Permutation) -> Self {
        Self {
            kind: StrategyKind::Fixed,
            fixed_order: Some(order),
        }
    }

    pub fn random() -> Self {
        Self {
            kind: StrategyKind::Random,
            fixed_order: None,
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        match (&self.kind, &self.fixed_order) {
            (StrategyKind::Fixed, None) => arg_err("fixed ordering requires fixed_order"),
            (StrategyKind::Fixed, Some(o)) if o.len() != n_agents => {
                arg_err(format!("fixed_order has {} entries for {n_agents} agents", o.len()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic sampling.
    Train,
    /// Deterministic: the P-L mode and argmax actions.
    Infer,
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Choose the action-generation order for one step.
pub fn select_order<R: Rng + ?Sized>(
    credits: &DecisionCredits,
    strategy: &OrderingStrategy,
    mode: Mode,
    rng: &mut R,
) -> Result<OrderSample> {
    let z = &credits.0;
    strategy.validate(z.len())?;
    Ok(match strategy.kind {
        StrategyKind::LearnedPl => match mode {
            Mode::Train => pl_sample(z, rng),
            Mode::Infer => {
                let permutation = pl_mode(z);
                let log_prob = pl_log_prob(z, &permutation)?;
                OrderSample { permutation, log_prob }
            }
        },
        StrategyKind::Fixed => {
            let permutation = strategy.fixed_order.clone().expect("validated");
            let log_prob = pl_log_prob(z, &permutation)?;
            OrderSample { permutation, log_prob }
        }
        StrategyKind::Random => {
            let mut order: Vec<usize> = (0..z.len()).collect();
            order.shuffle(rng);
            OrderSample {
                permutation: Permutation::new(order)?,
                log_prob: -ln_factorial(z.len()),
            }
        }
    })
}
