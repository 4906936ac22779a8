use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::JointActionRecord;

/// One decision step as collected by a rollout worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// `[n_agents][obs_dim]`.
    pub observations: Vec<Vec<f64>>,
    pub record: JointActionRecord,
    /// Joint team reward.
    pub reward: f64,
    pub done: bool,
}

/// A contiguous stretch of transitions from one environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    /// Mean value of the state reached after the last transition. Only
    /// read when that transition is not terminal.
    pub bootstrap_value: Option<f64>,
    /// One per transition, shared by all agents.
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Generalized advantage estimation over one trajectory segment.
///
/// `values[t]` is the mean agent value at step `t`; `bootstrap` is the value
/// after the last step. Returns `(advantages, value_targets)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

impl RolloutBatch {
    /// Mean per-agent value of each transition.
    pub fn mean_values(&self) -> Result<Vec<f64>> {
        self.transitions
            .iter()
            .enumerate()
            .map(|(t, tr)| {
                let v = &tr.record.values;
                if v.is_empty() {
                    Err(Error::State(format!("transition {t} has no value estimates")))
                } else {
                    Ok(v.iter().sum::<f64>() / v.len() as f64)
                }
            })
            .collect()
    }

    /// Fill `advantages` and `value_targets`.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let values = self.mean_values()?;
        let last_done = self.transitions.last().is_none_or(|t| t.done);
        let bootstrap = match (last_done, self.bootstrap_value) {
            (true, _) => 0.0,
            (false, Some(v)) => v,
            (false, None) => return Err(Error::State("unfinished segment has no bootstrap value".into())),
        };
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, targets) = gae(&rewards, &values, &dones, bootstrap, gamma, lambda);
        self.advantages = adv;
        self.value_targets = targets;
        Ok(())
    }
}
