use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvSpec};
use crate::error::{arg_err, Error, Result};
use crate::nn::{Adam, Tape};
use crate::pl::{pl_entropy, PreferenceLogits};
use crate::policy::{Mode, OrderingStrategy, Pmat, StrategyKind};
use crate::train::config::TrainConfig;
use crate::train::loss::{build_losses, LossSettings, Minibatch};
use crate::train::rollout::{RolloutBatch, Transition};

/// Stream reserved for minibatch shuffling; environments use streams
/// `0..rollout_threads`.
const UPDATE_STREAM: u64 = u64::MAX;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    /// Mean return of episodes finished during this iteration, or the mean
    /// step reward when none finished.
    pub mean_return: f64,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    /// Absent for fixed and random orderings.
    pub ranking_loss: Option<f64>,
    /// Mean P-L entropy of the collection-time credits.
    pub order_entropy: Option<f64>,
    pub approx_kl: f64,
}

/// Seeded generator for environment `index`.
pub fn env_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone)]
struct EnvSlot {
    env: Env,
    rng: ChaCha8Rng,
    obs: Vec<Vec<f64>>,
    running_return: f64,
}

/// Rollout collection plus PPO updates for one policy.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Pmat,
    pub strategy: OrderingStrategy,
    pub config: TrainConfig,
    adam: Adam,
    slots: Vec<EnvSlot>,
    update_rng: ChaCha8Rng,
    iteration: u64,
    env_steps: u64,
}

#[derive(Debug, Clone, Default)]
struct Collected {
    batches: Vec<RolloutBatch>,
    returns: Vec<f64>,
}

fn collect_chunk(model: &Pmat, strategy: &OrderingStrategy, slots: &mut [EnvSlot], steps: usize) -> Result<Collected> {
    let mut rngs: Vec<ChaCha8Rng> = slots.iter().map(|s| s.rng.clone()).collect();
    let mut batches = vec![RolloutBatch::default(); slots.len()];
    let mut returns = Vec::new();
    for _ in 0..steps {
        let obs: Vec<Vec<Vec<f64>>> = slots.iter().map(|s| s.obs.clone()).collect();
        let records = model.act(&obs, strategy, Mode::Train, &mut rngs)?;
        for (((slot, rng), record), batch) in slots.iter_mut().zip(rngs.iter_mut()).zip(records).zip(batches.iter_mut()) {
            let out = slot.env.step(&record.actions, rng)?;
            slot.running_return += out.reward;
            let observations = std::mem::replace(
                &mut slot.obs,
                if out.done { slot.env.reset(rng) } else { out.observations },
            );
            if out.done {
                returns.push(slot.running_return);
                slot.running_return = 0.0;
            }
            batch.transitions.push(Transition {
                observations,
                record,
                reward: out.reward,
                done: out.done,
            });
        }
    }
    let last_obs: Vec<Vec<Vec<f64>>> = slots.iter().map(|s| s.obs.clone()).collect();
    let boot = model.mean_values(&last_obs)?;
    for ((batch, v), (slot, rng)) in batches.iter_mut().zip(boot).zip(slots.iter_mut().zip(rngs)) {
        batch.bootstrap_value = Some(v);
        slot.rng = rng;
    }
    Ok(Collected { batches, returns })
}

impl Trainer {
    pub fn new(model: Pmat, strategy: OrderingStrategy, env: &EnvSpec, config: TrainConfig, seed: u64) -> Result<Self> {
        if let Err((field, msg)) = config.check() {
            return arg_err(format!("train.{field}: {msg}"));
        }
        strategy.validate(model.config().n_agents)?;
        if env.n_agents != model.config().n_agents || env.obs_dim() != model.config().obs_dim {
            return arg_err("model shape does not match the environment");
        }
        let slots = (0..config.rollout_threads)
            .map(|i| {
                let mut rng = env_rng(seed, i);
                let mut env = Env::new(env.clone())?;
                let obs = env.reset(&mut rng);
                Ok(EnvSlot {
                    env,
                    rng,
                    obs,
                    running_return: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adam: Adam::new(&model.store),
            model,
            strategy,
            config,
            slots,
            update_rng: env_rng(seed, UPDATE_STREAM as usize),
            iteration: 0,
            env_steps: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn uses_ranking(&self) -> bool {
        self.strategy.kind == StrategyKind::LearnedPl
    }

    /// Collect `episode_length` steps from every environment and compute GAE.
    pub fn collect(&mut self) -> Result<(Vec<RolloutBatch>, Vec<f64>)> {
        let steps = self.config.episode_length;
        let per = self.slots.len().div_ceil(self.config.workers.min(self.slots.len()));
        let (model, strategy) = (&self.model, &self.strategy);
        let parts: Vec<Result<Collected>> = if self.config.workers == 1 {
            vec![collect_chunk(model, strategy, &mut self.slots, steps)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .slots
                    .chunks_mut(per)
                    .map(|chunk| s.spawn(move || collect_chunk(model, strategy, chunk, steps)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("rollout worker panicked".into()))))
                    .collect()
            })
        };
        let mut batches = Vec::with_capacity(self.slots.len());
        let mut returns = Vec::new();
        for p in parts {
            let c = p?;
            batches.extend(c.batches);
            returns.extend(c.returns);
        }
        for b in &mut batches {
            b.compute_gae(self.config.gamma, self.config.gae_lambda)?;
        }
        self.env_steps += (steps * self.slots.len()) as u64;
        Ok((batches, returns))
    }

    fn settings(&self) -> LossSettings {
        LossSettings {
            clip_eps: self.config.clip_eps,
            entropy_coef: self.config.entropy_coef,
            ranking_loss_coef: self.config.ranking_loss_coef,
            normalize_advantages: self.config.normalize_advantages,
            use_ranking: self.uses_ranking(),
        }
    }

    fn order_entropy(&self, data: &Minibatch) -> Result<f64> {
        let mut tape = Tape::new(&self.model.store);
        let enc = self.model.encode_on(&mut tape, data.observation_tensor()?)?;
        let c = self.model.credits_on(&mut tape, enc.reps)?;
        let c = tape.value(c);
        let mut total = 0.0;
        for b in 0..c.rows() {
            total += pl_entropy(&PreferenceLogits::new(c.row(b).to_vec())?)?;
        }
        Ok(total / c.rows() as f64)
    }

    /// One collection phase followed by `ppo_epochs` passes of updates.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let (batches, returns) = self.collect()?;
        let data = Minibatch::from_batches(&batches)?;
        let mean_return = if returns.is_empty() {
            batches.iter().flat_map(|b| &b.transitions).map(|t| t.reward).sum::<f64>() / data.len() as f64
        } else {
            returns.iter().sum::<f64>() / returns.len() as f64
        };
        let order_entropy = if self.uses_ranking() {
            Some(self.order_entropy(&data)?)
        } else {
            None
        };

        let settings = self.settings();
        let adam_cfg = self.config.adam();
        let n = self.model.config().n_agents;
        let per = data.len().div_ceil(self.config.num_minibatches);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        let (mut enc_sum, mut dec_sum, mut rank_sum, mut updates) = (0.0, 0.0, 0.0, 0usize);
        let (mut kl_sum, mut kl_count) = (0.0, 0usize);
        for epoch in 0..self.config.ppo_epochs {
            idx.shuffle(&mut self.update_rng);
            for chunk in idx.chunks(per) {
                let mb = data.select(chunk);
                let grads = {
                    let mut tape = Tape::new(&self.model.store);
                    let t = build_losses(&self.model, &mut tape, &mb, &settings)?;
                    enc_sum += tape.scalar(t.encoder);
                    dec_sum += tape.scalar(t.decoder);
                    if let Some(r) = t.ranking {
                        rank_sum += tape.scalar(r);
                    }
                    updates += 1;
                    if epoch + 1 == self.config.ppo_epochs {
                        let new = tape.value(t.log_probs).data();
                        for b in 0..mb.len() {
                            let log_ratio: f64 = (0..n).map(|i| new[b * n + i] - mb.behavior_log_probs[b * n + i]).sum();
                            kl_sum += log_ratio.exp() - 1.0 - log_ratio;
                            kl_count += 1;
                        }
                    }
                    tape.backward(t.total)?
                };
                self.adam.step(&mut self.model.store, &grads, &adam_cfg)?;
            }
        }
        if !self.model.store.segments().iter().all(|s| s.data.iter().all(|x| x.is_finite())) {
            return Err(Error::State("parameters became non-finite".into()));
        }
        self.iteration += 1;
        let u = updates as f64;
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_return,
            encoder_loss: enc_sum / u,
            decoder_loss: dec_sum / u,
            ranking_loss: self.uses_ranking().then_some(rank_sum / u),
            order_entropy,
            approx_kl: kl_sum / kl_count.max(1) as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pl::Permutation;
    use crate::policy::ModelConfig;

    fn trainer(strategy: OrderingStrategy, workers: usize, seed: u64) -> Trainer {
        let env = EnvSpec::key_agent(3, 3);
        let mut cfg = ModelConfig::new(3, env.obs_dim(), 3);
        cfg.d_model = 16;
        cfg.heads = 2;
        let model = Pmat::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tc = TrainConfig {
            episode_length: 4,
            rollout_threads: 5,
            ppo_epochs: 2,
            num_minibatches: 2,
            workers,
            ..Default::default()
        };
        Trainer::new(model, strategy, &env, tc, seed).unwrap()
    }

    #[test]
    fn one_iteration_reports_finite_metrics() {
        let mut t = trainer(OrderingStrategy::learned(), 1, 0);
        let m = t.train_iteration().unwrap();
        assert_eq!(m.iteration, 1);
        assert_eq!(m.env_steps, 20);
        assert!((0.0..=1.0).contains(&m.mean_return));
        assert!(m.encoder_loss.is_finite() && m.decoder_loss.is_finite() && m.approx_kl >= 0.0);
        assert!(m.ranking_loss.unwrap().is_finite());
        let h = m.order_entropy.unwrap();
        assert!(h > 0.0 && h <= 6f64.ln() + 1e-9);
    }

    #[test]
    fn baseline_has_no_ranking_metrics() {
        let mut t = trainer(OrderingStrategy::fixed(Permutation::identity(3)), 1, 1);
        t.config.ranking_loss_coef = 0.0;
        let m = t.train_iteration().unwrap();
        assert!(m.ranking_loss.is_none() && m.order_entropy.is_none());
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"ranking_loss\":null"));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut a = trainer(OrderingStrategy::learned(), 1, 2);
        let mut b = trainer(OrderingStrategy::learned(), 3, 2);
        for _ in 0..2 {
            assert_eq!(a.train_iteration().unwrap(), b.train_iteration().unwrap());
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let mut a = trainer(OrderingStrategy::random(), 1, 3);
        let mut b = trainer(OrderingStrategy::random(), 1, 3);
        for _ in 0..2 {
            assert_eq!(a.train_iteration().unwrap(), b.train_iteration().unwrap());
        }
        let mut c = trainer(OrderingStrategy::random(), 1, 4);
        assert_ne!(a.train_iteration().unwrap(), c.train_iteration().unwrap());
    }

    #[test]
    fn ratios_start_at_one() {
        let mut t = trainer(OrderingStrategy::learned(), 1, 5);
        let (batches, _) = t.collect().unwrap();
        let data = Minibatch::from_batches(&batches).unwrap();
        let mut tape = Tape::new(&t.model.store);
        let terms = build_losses(&t.model, &mut tape, &data, &t.settings()).unwrap();
        for (new, old) in tape.value(terms.log_probs).data().iter().zip(&data.behavior_log_probs) {
            assert!((new - old).abs() < 1e-6);
        }
        let orders = tape.pl_log_prob(terms.credits, &data.orders).unwrap();
        for (new, old) in tape.value(orders).data().iter().zip(&data.behavior_order_log_probs) {
            assert!((new - old).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_mismatched_env() {
        let env = EnvSpec::key_agent(2, 3);
        let model = Pmat::new(ModelConfig::new(3, 4, 3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(Trainer::new(model, OrderingStrategy::learned(), &env, TrainConfig::default(), 0).is_err());
    }
}
