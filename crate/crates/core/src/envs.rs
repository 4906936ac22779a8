//! Small cooperative Markov games with controllable order dependence.
//!
//! * `key-agent-match`: one agent (the key) is told a target action τ.
//!   The team earns 0.5 if the key plays τ, plus 0.5 times the fraction of
//!   the other agents that copy whatever the key actually played.
//! * `joint-guess`: every agent sees the hidden target; reward 1 iff all
//!   agents play it.
//! * `tabular-generic`: a random finite game, observed as a one-hot state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    KeyAgentMatch,
    JointGuess,
    TabularGeneric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_agents: usize,
    pub n_actions: usize,
    #[serde(default = "default_episode_steps")]
    pub max_episode_steps: usize,
    /// State count of a `tabular-generic` game.
    #[serde(default = "default_states")]
    pub n_states: usize,
    /// Seed used to generate a `tabular-generic` game.
    #[serde(default)]
    pub game_seed: u64,
    /// Discount of the exact model of a `tabular-generic` game.
    #[serde(default = "default_oracle_gamma")]
    pub oracle_gamma: f64,
}

fn default_episode_steps() -> usize {
    1
}

fn default_states() -> usize {
    4
}

fn default_oracle_gamma() -> f64 {
    0.9
}

impl EnvSpec {
    pub fn key_agent(n_agents: usize, n_actions: usize) -> Self {
        Self::new(EnvKind::KeyAgentMatch, n_agents, n_actions)
    }

    pub fn joint_guess(n_agents: usize, n_actions: usize) -> Self {
        Self::new(EnvKind::JointGuess, n_agents, n_actions)
    }

    pub fn new(kind: EnvKind, n_agents: usize, n_actions: usize) -> Self {
        Self {
            kind,
            n_agents,
            n_actions,
            max_episode_steps: default_episode_steps(),
            n_states: default_states(),
            game_seed: 0,
            oracle_gamma: default_oracle_gamma(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::KeyAgentMatch => 1 + self.n_actions,
            EnvKind::JointGuess => self.n_actions,
            EnvKind::TabularGeneric => self.n_states,
        }
    }

    pub fn num_states(&self) -> usize {
        match self.kind {
            EnvKind::KeyAgentMatch => self.n_agents * self.n_actions,
            EnvKind::JointGuess => self.n_actions,
            EnvKind::TabularGeneric => self.n_states,
        }
    }

    /// Problems are reported as `(field, message)`.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let min_agents = match self.kind {
            EnvKind::TabularGeneric => 1,
            _ => 2,
        };
        if self.n_agents < min_agents {
            return Err(("n_agents", format!("must be at least {min_agents}")));
        }
        if self.n_actions < 2 {
            return Err(("n_actions", "must be at least 2".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(("max_episode_steps", "must be positive".into()));
        }
        if self.kind == EnvKind::TabularGeneric {
            if self.n_states == 0 {
                return Err(("n_states", "must be positive".into()));
            }
            if !(0.0..1.0).contains(&self.oracle_gamma) {
                return Err(("oracle_gamma", "must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Exact finite Markov game.
///
/// Joint actions are indexed in mixed radix with agent 0 as the least
/// significant digit.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularGame {
    pub n_states: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// `rewards[s][joint]`
    pub rewards: Vec<Vec<f64>>,
    /// `transitions[s][joint][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub initial: Vec<f64>,
}

impl TabularGame {
    pub fn n_joint(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    pub fn joint_index(&self, actions: &[usize]) -> usize {
        actions.iter().rev().fold(0, |acc, &a| acc * self.n_actions + a)
    }

    pub fn joint_actions(&self, mut index: usize) -> Vec<usize> {
        (0..self.n_agents)
            .map(|_| {
                let a = index % self.n_actions;
                index /= self.n_actions;
                a
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let nj = self.n_joint();
        if self.rewards.len() != self.n_states || self.transitions.len() != self.n_states {
            return arg_err("tables must have one row per state");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return arg_err(format!("gamma {} outside [0, 1)", self.gamma));
        }
        check_distribution(&self.initial, self.n_states, "initial distribution")?;
        for s in 0..self.n_states {
            if self.rewards[s].len() != nj || self.transitions[s].len() != nj {
                return arg_err(format!("state {s}: expected {nj} joint actions"));
            }
            if self.rewards[s].iter().any(|r| !r.is_finite()) {
                return arg_err(format!("state {s}: non-finite reward"));
            }
            for row in &self.transitions[s] {
                check_distribution(row, self.n_states, "transition row")?;
            }
        }
        Ok(())
    }

    /// A random game with rewards in [-1, 1] and Dirichlet-like transitions.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_agents: usize,
        n_actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Self {
        let nj = n_actions.pow(n_agents as u32);
        let rewards = (0..n_states)
            .map(|_| (0..nj).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let simplex = |rng: &mut R| {
            let w: Vec<f64> = (0..n_states).map(|_| -rng.random_range(f64::MIN_POSITIVE..1.0).ln()).collect();
            let t: f64 = w.iter().sum();
            w.into_iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        let transitions = (0..n_states)
            .map(|_| (0..nj).map(|_| simplex(rng)).collect())
            .collect();
        let initial = simplex(rng);
        Self {
            n_states,
            n_agents,
            n_actions,
            rewards,
            transitions,
            gamma,
            initial,
        }
    }
}

fn check_distribution(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return arg_err(format!("{what} has {} entries, expected {n}", p.len()));
    }
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return arg_err(format!("{what} has entries outside [0, 1]"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return arg_err(format!("{what} sums to {s}"));
    }
    Ok(())
}

pub fn key_agent_reward(key: usize, target: usize, actions: &[usize]) -> f64 {
    let key_action = actions[key];
    let followers = actions.len() - 1;
    let copied = actions
        .iter()
        .enumerate()
        .filter(|&(i, &a)| i != key && a == key_action)
        .count();
    let mut r = if key_action == target { 0.5 } else { 0.0 };
    if followers > 0 {
        r += 0.5 * copied as f64 / followers as f64;
    }
    r
}

pub fn joint_guess_reward(target: usize, actions: &[usize]) -> f64 {
    if actions.iter().all(|&a| a == target) {
        1.0
    } else {
        0.0
    }
}

/// Exact tabular model of a spec. Key-agent and joint-guess states are
/// redrawn i.i.d. every step regardless of the joint action, so their model
/// uses γ = 0: advantages do not depend on the future.
pub fn tabular_from_spec(spec: &EnvSpec) -> Result<TabularGame> {
    if let Err((field, msg)) = spec.validate() {
        return arg_err(format!("env.{field}: {msg}"));
    }
    let n_states = spec.num_states();
    let uniform = vec![1.0 / n_states as f64; n_states];
    let mut game = TabularGame {
        n_states,
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        rewards: Vec::new(),
        transitions: Vec::new(),
        gamma: 0.0,
        initial: uniform.clone(),
    };
    let nj = game.n_joint();
    match spec.kind {
        EnvKind::KeyAgentMatch | EnvKind::JointGuess => {
            for s in 0..n_states {
                let row = (0..nj)
                    .map(|j| {
                        let a = game.joint_actions(j);
                        match spec.kind {
                            EnvKind::KeyAgentMatch => {
                                key_agent_reward(s / spec.n_actions, s % spec.n_actions, &a)
                            }
                            _ => joint_guess_reward(s, &a),
                        }
                    })
                    .collect();
                game.rewards.push(row);
                game.transitions.push(vec![uniform.clone(); nj]);
            }
        }
        EnvKind::TabularGeneric => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.game_seed);
            game = TabularGame::random(n_states, spec.n_agents, spec.n_actions, spec.oracle_gamma, &mut rng);
        }
    }
    game.validate()?;
    Ok(game)
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
}

/// A running environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    game: Option<TabularGame>,
    state: usize,
    t: usize,
    noise: Vec<f64>,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        if let Err((field, msg)) = spec.validate() {
            return arg_err(format!("env.{field}: {msg}"));
        }
        let game = match spec.kind {
            EnvKind::TabularGeneric => Some(tabular_from_spec(&spec)?),
            _ => None,
        };
        let noise = vec![0.0; spec.n_agents];
        Ok(Self {
            spec,
            game,
            state: 0,
            t: 0,
            noise,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Index of the current state in the tabular model.
    pub fn state_id(&self) -> usize {
        self.state
    }

    /// The key agent of the current state (key-agent-match only).
    pub fn key_agent(&self) -> Option<usize> {
        (self.spec.kind == EnvKind::KeyAgentMatch).then(|| self.state / self.spec.n_actions)
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Vec<f64>> {
        self.t = 0;
        self.draw_state(rng);
        self.observations()
    }

    /// Force a state (used to cross-check the simulator against the tables).
    pub fn set_state<R: Rng + ?Sized>(&mut self, state: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if state >= self.spec.num_states() {
            return arg_err(format!("state {state} out of range"));
        }
        self.state = state;
        self.t = 0;
        self.redraw_noise(rng);
        Ok(self.observations())
    }

    fn draw_state<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.state = match &self.game {
            Some(g) => sample_index(&g.initial, rng),
            None => rng.random_range(0..self.spec.num_states()),
        };
        self.redraw_noise(rng);
    }

    fn redraw_noise<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.spec.kind == EnvKind::KeyAgentMatch {
            for n in self.noise.iter_mut() {
                *n = rng.random::<f64>();
            }
        }
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        let spec = &self.spec;
        match spec.kind {
            EnvKind::KeyAgentMatch => {
                let (key, target) = (self.state / spec.n_actions, self.state % spec.n_actions);
                (0..spec.n_agents)
                    .map(|i| {
                        let mut o = vec![0.0; spec.obs_dim()];
                        if i == key {
                            o[0] = 1.0;
                            o[1 + target] = 1.0;
                        } else {
                            o[1..].iter_mut().for_each(|x| *x = self.noise[i]);
                        }
                        o
                    })
                    .collect()
            }
            EnvKind::JointGuess | EnvKind::TabularGeneric => {
                let mut o = vec![0.0; spec.obs_dim()];
                o[self.state] = 1.0;
                vec![o; spec.n_agents]
            }
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, actions: &[usize], rng: &mut R) -> Result<StepOutcome> {
        let spec = &self.spec;
        if actions.len() != spec.n_agents {
            return arg_err(format!("expected {} actions, got {}", spec.n_agents, actions.len()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= spec.n_actions) {
            return arg_err(format!("action {bad} out of range 0..{}", spec.n_actions));
        }
        let reward = match spec.kind {
            EnvKind::KeyAgentMatch => {
                key_agent_reward(self.state / spec.n_actions, self.state % spec.n_actions, actions)
            }
            EnvKind::JointGuess => joint_guess_reward(self.state, actions),
            EnvKind::TabularGeneric => {
                let g = self.game.as_ref().ok_or_else(|| Error::State("missing game".into()))?;
                let j = g.joint_index(actions);
                let r = g.rewards[self.state][j];
                self.state = sample_index(&g.transitions[self.state][j], rng);
                r
            }
        };
        if self.spec.kind != EnvKind::TabularGeneric {
            self.draw_state(rng);
        }
        self.t += 1;
        let done = self.t >= self.spec.max_episode_steps;
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            done,
        })
    }
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &pi) in p.iter().enumerate() {
        if u < pi {
            return i;
        }
        u -= pi;
    }
    p.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn key_agent_reset_marks_one_key() {
        let mut env = Env::new(EnvSpec::key_agent(3, 3)).unwrap();
        let mut r = rng(1);
        for _ in 0..50 {
            let obs = env.reset(&mut r);
            assert_eq!(obs.iter().filter(|o| o[0] == 1.0).count(), 1);
            let key = env.key_agent().unwrap();
            assert_eq!(obs[key][0], 1.0);
            assert_eq!(obs[key][1..].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn joint_guess_and_tabular_observations() {
        let mut r = rng(2);
        let mut env = Env::new(EnvSpec::joint_guess(3, 4)).unwrap();
        let obs = env.reset(&mut r);
        assert!(obs.iter().all(|o| o == &obs[0]));
        assert_eq!(obs[0][env.state_id()], 1.0);

        let mut spec = EnvSpec::new(EnvKind::TabularGeneric, 2, 2);
        spec.n_states = 5;
        let mut env = Env::new(spec).unwrap();
        let obs = env.reset(&mut r);
        assert_eq!(obs[0].len(), 5);
        assert_eq!(obs[0].iter().sum::<f64>(), 1.0);
        assert_eq!(obs[1][env.state_id()], 1.0);
    }

    #[test]
    fn key_agent_rewards() {
        // key 1, target 2
        assert_eq!(key_agent_reward(1, 2, &[2, 2, 2]), 1.0);
        assert_eq!(key_agent_reward(1, 2, &[0, 2, 1]), 0.5);
        assert_eq!(key_agent_reward(1, 2, &[0, 0, 0]), 0.5);
        assert_eq!(key_agent_reward(1, 2, &[0, 1, 0]), 0.0);
        assert_eq!(key_agent_reward(1, 2, &[2, 2, 0]), 0.75);
    }

    #[test]
    fn step_validates_actions() {
        let mut env = Env::new(EnvSpec::key_agent(2, 2)).unwrap();
        let mut r = rng(3);
        env.reset(&mut r);
        assert!(env.step(&[0, 2], &mut r).is_err());
        assert!(env.step(&[0], &mut r).is_err());
        let out = env.step(&[0, 0], &mut r).unwrap();
        assert!(out.done);
    }

    #[test]
    fn table_matches_simulator() {
        let spec = EnvSpec::key_agent(2, 2);
        let game = tabular_from_spec(&spec).unwrap();
        assert_eq!(game.n_states, 4);
        let mut env = Env::new(spec).unwrap();
        let mut r = rng(4);
        for s in 0..4 {
            for j in 0..game.n_joint() {
                env.set_state(s, &mut r).unwrap();
                let a = game.joint_actions(j);
                assert_eq!(game.joint_index(&a), j);
                let out = env.step(&a, &mut r).unwrap();
                assert_eq!(out.reward, game.rewards[s][j]);
            }
        }

        let game = tabular_from_spec(&EnvSpec::joint_guess(2, 2)).unwrap();
        assert_eq!(game.n_states, 2);
        assert_eq!(game.rewards[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(game.rewards[1], vec![0.0, 0.0, 0.0, 1.0]);
        for row in game.transitions.iter().flatten() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let run = |seed| {
            let mut env = Env::new(EnvSpec::key_agent(3, 3)).unwrap();
            let mut r = rng(seed);
            let mut trace = vec![env.reset(&mut r)];
            for k in 0..20 {
                trace.push(env.step(&[k % 3, 1, 2], &mut r).unwrap().observations);
            }
            trace
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn invalid_specs() {
        assert!(Env::new(EnvSpec::key_agent(1, 3)).is_err());
        assert!(Env::new(EnvSpec::key_agent(3, 1)).is_err());
        let mut g = tabular_from_spec(&EnvSpec::joint_guess(2, 2)).unwrap();
        g.transitions[0][0][0] += 0.1;
        assert!(g.validate().is_err());
    }
}
