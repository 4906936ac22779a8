//! Exact ground truth on tabular games: policy values, multi-agent
//! advantages, the sequential advantage decomposition, and exhaustive search
//! over decision orders.

use rand::Rng;
use serde::Serialize;

use crate::envs::TabularGame;
use crate::error::{arg_err, Error, Result};
use crate::pl::{all_permutations, Permutation};

/// Largest agent count accepted by [`optimal_order_search`].
pub const MAX_SEARCH_AGENTS: usize = 6;

const VALUE_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 1_000_000;
/// Differences below this are treated as ties.
const TIE_TOL: f64 = 1e-12;

/// Independent per-agent tabular policy: `probs[s][agent][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Vec<Vec<Vec<f64>>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (s, agents) in probs.iter().enumerate() {
            for (i, row) in agents.iter().enumerate() {
                let total: f64 = row.iter().sum();
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
                    return arg_err(format!("policy row (state {s}, agent {i}) is not a distribution"));
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(game: &TabularGame) -> Self {
        let row = vec![1.0 / game.n_actions as f64; game.n_actions];
        Self {
            probs: vec![vec![row; game.n_agents]; game.n_states],
        }
    }

    /// Independent random rows with every probability at least about 0.05/n.
    pub fn random<R: Rng + ?Sized>(game: &TabularGame, rng: &mut R) -> Self {
        let probs = (0..game.n_states)
            .map(|_| {
                (0..game.n_agents)
                    .map(|_| {
                        let w: Vec<f64> = (0..game.n_actions).map(|_| rng.random_range(0.05..1.0)).collect();
                        let t: f64 = w.iter().sum();
                        w.into_iter().map(|x| x / t).collect()
                    })
                    .collect()
            })
            .collect();
        Self { probs }
    }

    pub fn prob(&self, s: usize, agent: usize, action: usize) -> f64 {
        self.probs[s][agent][action]
    }

    fn check(&self, game: &TabularGame) -> Result<()> {
        let ok = self.probs.len() == game.n_states
            && self
                .probs
                .iter()
                .all(|a| a.len() == game.n_agents && a.iter().all(|r| r.len() == game.n_actions));
        if !ok {
            return arg_err("policy shape does not match game");
        }
        Ok(())
    }

    fn joint_prob(&self, game: &TabularGame, s: usize, joint: usize) -> f64 {
        game.joint_actions(joint)
            .iter()
            .enumerate()
            .map(|(i, &a)| self.probs[s][i][a])
            .product()
    }
}

/// `V_π` and `Q_π` of a game under a fixed policy.
#[derive(Debug, Clone)]
pub struct ExactValues {
    pub v: Vec<f64>,
    /// `q[s][joint]`
    pub q: Vec<Vec<f64>>,
    pub policy: TabularPolicy,
}

impl ExactValues {
    pub fn advantage(&self, s: usize, joint: usize) -> f64 {
        self.q[s][joint] - self.v[s]
    }

    /// Max over states of `|V - (R_π + γ P_π V)|`, recomputed from scratch.
    pub fn bellman_residual(&self, game: &TabularGame) -> f64 {
        (0..game.n_states)
            .map(|s| {
                let backup: f64 = (0..game.n_joint())
                    .map(|j| {
                        let p = self.policy.joint_prob(game, s, j);
                        let next: f64 = game.transitions[s][j].iter().zip(&self.v).map(|(t, v)| t * v).sum();
                        p * (game.rewards[s][j] + game.gamma * next)
                    })
                    .sum();
                (self.v[s] - backup).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Policy evaluation by repeated Bellman backups, then one-step lookahead
/// for `Q`.
pub fn exact_values(game: &TabularGame, policy: &TabularPolicy) -> Result<ExactValues> {
    game.validate()?;
    policy.check(game)?;
    let (ns, nj) = (game.n_states, game.n_joint());
    let joint_p: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..nj).map(|j| policy.joint_prob(game, s, j)).collect())
        .collect();
    let r_pi: Vec<f64> = (0..ns)
        .map(|s| (0..nj).map(|j| joint_p[s][j] * game.rewards[s][j]).sum())
        .collect();
    let p_pi: Vec<Vec<f64>> = (0..ns)
        .map(|s| {
            (0..ns)
                .map(|t| (0..nj).map(|j| joint_p[s][j] * game.transitions[s][j][t]).sum())
                .collect()
        })
        .collect();

    let mut v = r_pi.clone();
    if game.gamma > 0.0 {
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let next: Vec<f64> = (0..ns)
                .map(|s| r_pi[s] + game.gamma * p_pi[s].iter().zip(&v).map(|(p, x)| p * x).sum::<f64>())
                .collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            // contraction: distance to the fixed point ≤ γ/(1-γ) · delta
            if delta * game.gamma / (1.0 - game.gamma) < VALUE_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::State("policy evaluation did not converge".into()));
        }
    }
    let q = (0..ns)
        .map(|s| {
            (0..nj)
                .map(|j| {
                    let next: f64 = game.transitions[s][j].iter().zip(&v).map(|(t, x)| t * x).sum();
                    game.rewards[s][j] + game.gamma * next
                })
                .collect()
        })
        .collect();
    Ok(ExactValues {
        v,
        q,
        policy: policy.clone(),
    })
}

/// `Q^{S}(s, a^S)`: expectation of `Q` over the agents not in `assigned`.
fn q_marginal(values: &ExactValues, game: &TabularGame, s: usize, assigned: &[Option<usize>]) -> f64 {
    let free: Vec<usize> = (0..game.n_agents).filter(|&i| assigned[i].is_none()).collect();
    let mut actions: Vec<usize> = assigned.iter().map(|a| a.unwrap_or(0)).collect();
    let combos = game.n_actions.pow(free.len() as u32);
    let mut total = 0.0;
    for c in 0..combos {
        let mut rest = c;
        let mut p = 1.0;
        for &i in &free {
            actions[i] = rest % game.n_actions;
            rest /= game.n_actions;
            p *= values.policy.prob(s, i, actions[i]);
        }
        if p != 0.0 {
            total += p * values.q[s][game.joint_index(&actions)];
        }
    }
    total
}

fn assign(
    game: &TabularGame,
    assigned: &mut [Option<usize>],
    agents: &[usize],
    actions: &[usize],
) -> Result<()> {
    if agents.len() != actions.len() {
        return arg_err("agent and action lists differ in length");
    }
    for (&i, &a) in agents.iter().zip(actions) {
        if i >= game.n_agents || a >= game.n_actions {
            return arg_err(format!("agent {i} / action {a} out of range"));
        }
        if assigned[i].is_some() {
            return arg_err(format!("agent {i} appears in both subsets or twice"));
        }
        assigned[i] = Some(a);
    }
    Ok(())
}

/// Advantage of `new_agents` playing `new_actions` once `prefix_agents` have
/// played `prefix_actions`: `Q^{prefix ∪ new} - Q^{prefix}`.
#[allow(clippy::too_many_arguments)]
pub fn multi_agent_advantage(
    values: &ExactValues,
    game: &TabularGame,
    s: usize,
    prefix_agents: &[usize],
    prefix_actions: &[usize],
    new_agents: &[usize],
    new_actions: &[usize],
) -> Result<f64> {
    if s >= game.n_states {
        return arg_err(format!("state {s} out of range"));
    }
    let mut assigned = vec![None; game.n_agents];
    assign(game, &mut assigned, prefix_agents, prefix_actions)?;
    let base = q_marginal(values, game, s, &assigned);
    assign(game, &mut assigned, new_agents, new_actions)?;
    if new_agents.is_empty() {
        return Ok(0.0);
    }
    Ok(q_marginal(values, game, s, &assigned) - base)
}

/// `|A(s, a) - Σ_k A^{i_k}(s, a^{i_{1:k-1}}, a^{i_k})|` along `order`.
pub fn verify_decomposition(
    values: &ExactValues,
    game: &TabularGame,
    s: usize,
    order: &Permutation,
    joint_action: &[usize],
) -> Result<f64> {
    if order.len() != game.n_agents || joint_action.len() != game.n_agents {
        return arg_err("order and joint action must cover every agent");
    }
    let agents = order.as_slice();
    let acts: Vec<usize> = agents.iter().map(|&i| joint_action[i]).collect();
    let joint = multi_agent_advantage(values, game, s, &[], &[], agents, &acts)?;
    let mut sum = 0.0;
    for k in 0..agents.len() {
        sum += multi_agent_advantage(values, game, s, &agents[..k], &acts[..k], &agents[k..=k], &acts[k..=k])?;
    }
    Ok((joint - sum).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderEvaluation {
    pub order: Permutation,
    pub joint_advantage: f64,
    /// Agent-indexed joint action reached by greedy sequential best response.
    pub best_response_actions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderSearch {
    /// One entry per order, in lexicographic order.
    pub evaluations: Vec<OrderEvaluation>,
    /// Index into `evaluations` of the best order.
    pub argmax: usize,
}

impl OrderSearch {
    pub fn best(&self) -> &OrderEvaluation {
        &self.evaluations[self.argmax]
    }

    pub fn spread(&self) -> f64 {
        let (lo, hi) = self
            .evaluations
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.joint_advantage), hi.max(e.joint_advantage))
            });
        hi - lo
    }

    /// Whether `order` reaches the maximal joint advantage (up to ties).
    pub fn is_optimal(&self, order: &Permutation) -> bool {
        let best = self.best().joint_advantage;
        self.evaluations
            .iter()
            .any(|e| &e.order == order && e.joint_advantage >= best - 1e-9)
    }
}

/// Joint action produced when agents act in `order`, each maximizing its own
/// advantage given its predecessors (ties → lowest action id).
pub fn greedy_sequential(values: &ExactValues, game: &TabularGame, s: usize, order: &Permutation) -> Result<Vec<usize>> {
    let agents = order.as_slice();
    let mut acts = Vec::with_capacity(agents.len());
    for k in 0..agents.len() {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..game.n_actions {
            let adv = multi_agent_advantage(values, game, s, &agents[..k], &acts, &agents[k..=k], &[a])?;
            if adv > best.1 + TIE_TOL {
                best = (a, adv);
            }
        }
        acts.push(best.0);
    }
    Ok(order.to_agent_indexed(&acts))
}

/// Evaluate all `n!` orders in state `s` and pick the best (ties → the
/// lexicographically smallest order).
pub fn optimal_order_search(values: &ExactValues, game: &TabularGame, s: usize) -> Result<OrderSearch> {
    if game.n_agents > MAX_SEARCH_AGENTS {
        return Err(Error::Size(format!(
            "order search over {} agents exceeds the limit of {MAX_SEARCH_AGENTS}",
            game.n_agents
        )));
    }
    let mut evaluations: Vec<OrderEvaluation> = Vec::new();
    let mut argmax = 0;
    for order in all_permutations(game.n_agents) {
        let actions = greedy_sequential(values, game, s, &order)?;
        let joint_advantage = values.advantage(s, game.joint_index(&actions));
        if evaluations.is_empty() || joint_advantage > evaluations[argmax].joint_advantage + TIE_TOL {
            argmax = evaluations.len();
        }
        evaluations.push(OrderEvaluation {
            order,
            joint_advantage,
            best_response_actions: actions,
        });
    }
    Ok(OrderSearch { evaluations, argmax })
}

/// Largest decomposition residual over every state, order and joint action.
pub fn max_decomposition_residual(values: &ExactValues, game: &TabularGame) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let orders = all_permutations(game.n_agents);
    for s in 0..game.n_states {
        for j in 0..game.n_joint() {
            let a = game.joint_actions(j);
            for order in &orders {
                worst = worst.max(verify_decomposition(values, game, s, order, &a)?);
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{tabular_from_spec, EnvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_policy(game: &TabularGame, rng: &mut ChaCha8Rng) -> TabularPolicy {
        TabularPolicy::random(game, rng)
    }

    #[test]
    fn myopic_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let game = TabularGame::random(3, 2, 2, 0.0, &mut rng);
        let pol = random_policy(&game, &mut rng);
        let vals = exact_values(&game, &pol).unwrap();
        for s in 0..3 {
            let expect: f64 = (0..4).map(|j| pol.joint_prob(&game, s, j) * game.rewards[s][j]).sum();
            assert!((vals.v[s] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_series() {
        let game = TabularGame {
            n_states: 1,
            n_agents: 2,
            n_actions: 2,
            rewards: vec![vec![0.7; 4]],
            transitions: vec![vec![vec![1.0]; 4]],
            gamma: 0.9,
            initial: vec![1.0],
        };
        let vals = exact_values(&game, &TabularPolicy::uniform(&game)).unwrap();
        assert!((vals.v[0] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn bellman_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let game = TabularGame::random(3, 2, 3, 0.95, &mut rng);
        let pol = random_policy(&game, &mut rng);
        let vals = exact_values(&game, &pol).unwrap();
        assert!(vals.bellman_residual(&game) < 1e-9);
    }

    #[test]
    fn rejects_bad_policy_rows() {
        assert!(TabularPolicy::new(vec![vec![vec![0.5, 0.6]]]).is_err());
        assert!(TabularPolicy::new(vec![vec![vec![1.5, -0.5]]]).is_err());
    }

    #[test]
    fn advantage_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let game = TabularGame::random(2, 3, 2, 0.5, &mut rng);
        let vals = exact_values(&game, &random_policy(&game, &mut rng)).unwrap();
        assert_eq!(multi_agent_advantage(&vals, &game, 1, &[0], &[1], &[], &[]).unwrap(), 0.0);
        let a = [1, 0, 1];
        let full = multi_agent_advantage(&vals, &game, 1, &[], &[], &[2, 0, 1], &[1, 1, 0]).unwrap();
        assert!((full - vals.advantage(1, game.joint_index(&a))).abs() < 1e-12);
        assert!(multi_agent_advantage(&vals, &game, 1, &[0], &[1], &[0], &[0]).is_err());
    }

    #[test]
    fn decomposition_two_agent_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let game = TabularGame::random(3, 2, 2, 0.8, &mut rng);
            let vals = exact_values(&game, &random_policy(&game, &mut rng)).unwrap();
            let (worst, checked) = max_decomposition_residual(&vals, &game).unwrap();
            assert_eq!(checked, 3 * 4 * 2);
            assert!(worst < 1e-9);
        }
    }

    #[test]
    fn decomposition_single_action_is_exact() {
        let game = TabularGame {
            n_states: 2,
            n_agents: 2,
            n_actions: 1,
            rewards: vec![vec![0.3], vec![-1.0]],
            transitions: vec![vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0]]],
            gamma: 0.7,
            initial: vec![1.0, 0.0],
        };
        let vals = exact_values(&game, &TabularPolicy::uniform(&game)).unwrap();
        for s in 0..2 {
            for order in all_permutations(2) {
                assert_eq!(verify_decomposition(&vals, &game, s, &order, &[0, 0]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn key_agent_search_prefers_key_first() {
        let game = tabular_from_spec(&EnvSpec::key_agent(2, 2)).unwrap();
        let vals = exact_values(&game, &TabularPolicy::uniform(&game)).unwrap();
        for s in 0..game.n_states {
            let (key, target) = (s / 2, s % 2);
            let search = optimal_order_search(&vals, &game, s).unwrap();
            let key_first = search.evaluations.iter().find(|e| e.order.as_slice()[0] == key).unwrap();
            let key_last = search.evaluations.iter().find(|e| e.order.as_slice()[0] != key).unwrap();
            assert!(search.is_optimal(&key_first.order));
            if target != 0 {
                // Without the key's action, followers fall back to action 0.
                assert_eq!(search.best().order.as_slice()[0], key);
                assert!(key_first.joint_advantage > key_last.joint_advantage + 0.1);
            }
        }
    }

    #[test]
    fn joint_guess_is_order_insensitive() {
        let game = tabular_from_spec(&EnvSpec::joint_guess(3, 3)).unwrap();
        let vals = exact_values(&game, &TabularPolicy::uniform(&game)).unwrap();
        for s in 0..game.n_states {
            assert!(optimal_order_search(&vals, &game, s).unwrap().spread() < 1e-9);
        }
    }

    #[test]
    fn search_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let game = TabularGame::random(1, 1, 2, 0.0, &mut rng);
        let vals = exact_values(&game, &TabularPolicy::uniform(&game)).unwrap();
        let search = optimal_order_search(&vals, &game, 0).unwrap();
        assert_eq!(search.evaluations.len(), 1);

        let big = TabularGame {
            n_states: 1,
            n_agents: 7,
            n_actions: 1,
            rewards: vec![vec![0.0]],
            transitions: vec![vec![vec![1.0]]],
            gamma: 0.0,
            initial: vec![1.0],
        };
        let vals = exact_values(&big, &TabularPolicy::uniform(&big)).unwrap();
        assert!(matches!(optimal_order_search(&vals, &big, 0), Err(Error::Size(_))));
    }

    #[test]
    fn argmax_invariant_to_reward_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let game = TabularGame::random(2, 3, 2, 0.6, &mut rng);
            let pol = random_policy(&game, &mut rng);
            let mut shifted = game.clone();
            shifted.rewards.iter_mut().flatten().for_each(|r| *r += 3.0);
            let a = exact_values(&game, &pol).unwrap();
            let b = exact_values(&shifted, &pol).unwrap();
            for s in 0..2 {
                let sa = optimal_order_search(&a, &game, s).unwrap();
                let sb = optimal_order_search(&b, &shifted, s).unwrap();
                assert_eq!(sa.best().order, sb.best().order);
            }
        }
    }
}
