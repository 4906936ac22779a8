use crate::error::{arg_err, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::pl::Permutation;
use crate::policy::{DecoderOutput, Pmat};
use crate::train::rollout::RolloutBatch;

/// Flattened training samples, one per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub n_agents: usize,
    /// `[batch][n_agents][obs_dim]`.
    pub observations: Vec<Vec<Vec<f64>>>,
    pub orders: Vec<Permutation>,
    /// Agent-indexed joint actions.
    pub actions: Vec<Vec<usize>>,
    /// `batch * n_agents`, agent-indexed within each timestep.
    pub behavior_log_probs: Vec<f64>,
    pub behavior_order_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl Minibatch {
    /// Concatenate batches that already went through GAE.
    pub fn from_batches(batches: &[RolloutBatch]) -> Result<Self> {
        let n_agents = match batches.iter().flat_map(|b| &b.transitions).next() {
            Some(t) => t.record.actions.len(),
            None => return arg_err("no transitions collected"),
        };
        let mut mb = Minibatch {
            n_agents,
            observations: Vec::new(),
            orders: Vec::new(),
            actions: Vec::new(),
            behavior_log_probs: Vec::new(),
            behavior_order_log_probs: Vec::new(),
            advantages: Vec::new(),
            value_targets: Vec::new(),
        };
        for b in batches {
            if b.advantages.len() != b.transitions.len() || b.value_targets.len() != b.transitions.len() {
                return arg_err("batch is missing advantages; run compute_gae first");
            }
            for t in &b.transitions {
                mb.observations.push(t.observations.clone());
                mb.orders.push(t.record.order.clone());
                mb.actions.push(t.record.actions.clone());
                mb.behavior_log_probs.extend_from_slice(&t.record.per_agent_log_probs);
                mb.behavior_order_log_probs.push(t.record.order_log_prob);
            }
            mb.advantages.extend_from_slice(&b.advantages);
            mb.value_targets.extend_from_slice(&b.value_targets);
        }
        Ok(mb)
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let n = self.n_agents;
        Minibatch {
            n_agents: n,
            observations: idx.iter().map(|&i| self.observations[i].clone()).collect(),
            orders: idx.iter().map(|&i| self.orders[i].clone()).collect(),
            actions: idx.iter().map(|&i| self.actions[i].clone()).collect(),
            behavior_log_probs: idx
                .iter()
                .flat_map(|&i| self.behavior_log_probs[i * n..(i + 1) * n].iter().copied())
                .collect(),
            behavior_order_log_probs: idx.iter().map(|&i| self.behavior_order_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            value_targets: idx.iter().map(|&i| self.value_targets[i]).collect(),
        }
    }

    pub fn observation_tensor(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.observations.iter().flatten().cloned().collect();
        Tensor::from_rows(&rows)
    }
}

/// Zero mean, unit (population) standard deviation.
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

fn column(tape: &mut Tape, v: Vec<f64>) -> Var {
    let rows = v.len();
    tape.input(Tensor::new(vec![rows, 1], v).expect("column shape"))
}

fn repeat_each(v: &[f64], k: usize) -> Vec<f64> {
    v.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect()
}

/// `-mean(min(r A, clip(r, 1 - eps, 1 + eps) A))` with `r = exp(new - old)`.
pub fn clipped_surrogate(tape: &mut Tape, new_log_probs: Var, old: &[f64], adv: &[f64], clip_eps: f64) -> Result<Var> {
    let rows = tape.value(new_log_probs).rows();
    if tape.value(new_log_probs).cols() != 1 || old.len() != rows || adv.len() != rows {
        return arg_err(format!(
            "surrogate: {rows} log-probs, {} behavior, {} advantages",
            old.len(),
            adv.len()
        ));
    }
    let old = column(tape, old.to_vec());
    let a = column(tape, adv.to_vec());
    let diff = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(diff);
    let s1 = tape.mul(ratio, a)?;
    let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let s2 = tape.mul(clipped, a)?;
    let m = tape.minimum(s1, s2)?;
    let mean = tape.mean(m);
    Ok(tape.scale(mean, -1.0))
}

/// Mean squared error between per-agent values `[batch * n, 1]` and the
/// per-timestep targets.
pub fn encoder_loss(tape: &mut Tape, values: Var, targets: &[f64]) -> Result<Var> {
    let rows = tape.value(values).rows();
    if targets.is_empty() || rows % targets.len() != 0 {
        return arg_err(format!("encoder loss: {rows} values for {} targets", targets.len()));
    }
    let t = column(tape, repeat_each(targets, rows / targets.len()));
    let d = tape.sub(values, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Clipped PPO over every agent's action, minus the entropy bonus.
/// `adv` holds one entry per timestep.
pub fn decoder_loss(
    tape: &mut Tape,
    dec: DecoderOutput,
    behavior: &[f64],
    adv: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<Var> {
    let rows = tape.value(dec.log_probs).rows();
    if adv.is_empty() || rows % adv.len() != 0 {
        return arg_err(format!("decoder loss: {rows} log-probs for {} advantages", adv.len()));
    }
    let per_agent = repeat_each(adv, rows / adv.len());
    let surr = clipped_surrogate(tape, dec.log_probs, behavior, &per_agent, clip_eps)?;
    let ent = tape.mean(dec.entropies);
    let bonus = tape.scale(ent, -entropy_coef);
    tape.add(surr, bonus)
}

/// Clipped PPO on the probability of each recorded order; `credits` is
/// `[batch, n]`.
pub fn ranking_loss(
    tape: &mut Tape,
    credits: Var,
    orders: &[Permutation],
    behavior: &[f64],
    adv: &[f64],
    clip_eps: f64,
) -> Result<Var> {
    let lp = tape.pl_log_prob(credits, orders)?;
    clipped_surrogate(tape, lp, behavior, adv, clip_eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub ranking_loss_coef: f64,
    pub normalize_advantages: bool,
    /// Include the ranking term (learned orders only).
    pub use_ranking: bool,
}

/// Handles to every term of one minibatch's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub encoder: Var,
    pub decoder: Var,
    pub ranking: Option<Var>,
    pub total: Var,
    pub credits: Var,
    /// Agent-indexed action log-probs, `[batch * n, 1]`.
    pub log_probs: Var,
}

/// Build `encoder + decoder + coef * ranking` for `mb` on `tape`.
pub fn build_losses(model: &Pmat, tape: &mut Tape, mb: &Minibatch, s: &LossSettings) -> Result<LossTerms> {
    if mb.is_empty() {
        return arg_err("empty minibatch");
    }
    let adv = if s.normalize_advantages {
        normalize(&mb.advantages)
    } else {
        mb.advantages.clone()
    };
    let enc = model.encode_on(tape, mb.observation_tensor()?)?;
    let encoder = encoder_loss(tape, enc.values, &mb.value_targets)?;
    let dec = model.decode_train_on(tape, enc.reps, &mb.orders, &mb.actions)?;
    let decoder = decoder_loss(tape, dec, &mb.behavior_log_probs, &adv, s.clip_eps, s.entropy_coef)?;
    let credits = model.credits_on(tape, enc.reps)?;
    let mut total = tape.add(encoder, decoder)?;
    let ranking = if s.use_ranking {
        let r = ranking_loss(tape, credits, &mb.orders, &mb.behavior_order_log_probs, &adv, s.clip_eps)?;
        let scaled = tape.scale(r, s.ranking_loss_coef);
        total = tape.add(total, scaled)?;
        Some(r)
    } else {
        None
    };
    Ok(LossTerms {
        encoder,
        decoder,
        ranking,
        total,
        credits,
        log_probs: dec.log_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParameterStore;
    use crate::pl::{pl_log_prob, PreferenceLogits};
    use crate::policy::{Mode, ModelConfig, OrderingStrategy};
    use crate::train::gradcheck::check_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_store() -> ParameterStore {
        ParameterStore::new()
    }

    #[test]
    fn encoder_loss_zero_and_offset() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let v = column(&mut tape, vec![1.0, 1.0, -2.0, -2.0]);
        let l = encoder_loss(&mut tape, v, &[1.0, -2.0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let v = column(&mut tape, vec![1.5, 1.5, -1.5, -1.5]);
        let l = encoder_loss(&mut tape, v, &[1.0, -2.0]).unwrap();
        assert!((tape.scalar(l) - 0.25).abs() < 1e-12);
        assert!(encoder_loss(&mut tape, v, &[]).is_err());
    }

    #[test]
    fn decoder_loss_ratio_one() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let old = vec![-0.1, -2.0, -0.5, -1.0];
        let lp = column(&mut tape, old.clone());
        let ent = column(&mut tape, vec![0.5, 0.7, 0.1, 0.3]);
        let adv = [1.0, -3.0];
        let dec = DecoderOutput { log_probs: lp, entropies: ent };
        let l = decoder_loss(&mut tape, dec, &old, &adv, 0.05, 0.01).unwrap();
        let expected = -(-1.0) - 0.01 * 0.4;
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn clip_selects_bounded_branch() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        // r = 2, A > 0: min(2A, 1.05A) = 1.05A
        let lp = column(&mut tape, vec![2f64.ln()]);
        let l = clipped_surrogate(&mut tape, lp, &[0.0], &[3.0], 0.05).unwrap();
        assert!((tape.scalar(l) + 1.05 * 3.0).abs() < 1e-12);
        // r = 0.5, A < 0: min(-0.5, -0.95) = 0.95A
        let lp = column(&mut tape, vec![0.5f64.ln()]);
        let l = clipped_surrogate(&mut tape, lp, &[0.0], &[-1.0], 0.05).unwrap();
        assert!((tape.scalar(l) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn ranking_loss_ratio_one_and_negative_clip() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let z = [0.3, -0.2, 1.1];
        let orders = vec![Permutation::new(vec![2, 0, 1]).unwrap(), Permutation::identity(3)];
        let behavior: Vec<f64> = orders
            .iter()
            .map(|o| pl_log_prob(&PreferenceLogits::new(z.to_vec()).unwrap(), o).unwrap())
            .collect();
        let credits = tape.input(Tensor::new(vec![2, 3], [z, z].concat()).unwrap());
        let l = ranking_loss(&mut tape, credits, &orders, &behavior, &[0.5, 1.5], 0.05).unwrap();
        assert!((tape.scalar(l) + 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = behavior.iter().map(|b| b - 0.5f64.ln()).collect();
        let l = ranking_loss(&mut tape, credits, &orders, &shifted, &[-1.0, -1.0], 0.05).unwrap();
        assert!((tape.scalar(l) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn normalization_moments() {
        let a = normalize(&[1.0, 2.0, 3.0, 10.0]);
        let mean = a.iter().sum::<f64>() / 4.0;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    /// A model, a minibatch collected from it, and a perturbed copy so that
    /// ratios differ from one.
    fn fixture(n: usize, steps: usize, seed: u64) -> (Pmat, Minibatch) {
        fixture_with(n, steps, seed, false)
    }

    fn fixture_with(n: usize, steps: usize, seed: u64, scoring_grad: bool) -> (Pmat, Minibatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(n, 3, 3);
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.scoring_grad_to_encoder = scoring_grad;
        let mut model = Pmat::new(cfg, &mut rng).unwrap();
        // sharpen heads so gradients are not vanishingly small
        for name in ["decoder.head.out.weight", "scoring.out.weight"] {
            let id = model.store.id(name).unwrap();
            model.store.get_mut(id).data.iter_mut().for_each(|w| *w *= 50.0);
        }
        let obs: Vec<Vec<Vec<f64>>> = (0..steps)
            .map(|_| (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..steps).map(|i| ChaCha8Rng::seed_from_u64(seed * 100 + i as u64)).collect();
        let recs = model.act(&obs, &OrderingStrategy::learned(), Mode::Train, &mut rngs).unwrap();
        let mb = Minibatch {
            n_agents: n,
            observations: obs,
            orders: recs.iter().map(|r| r.order.clone()).collect(),
            actions: recs.iter().map(|r| r.actions.clone()).collect(),
            behavior_log_probs: recs.iter().flat_map(|r| r.per_agent_log_probs.clone()).collect(),
            behavior_order_log_probs: recs.iter().map(|r| r.order_log_prob).collect(),
            advantages: (0..steps).map(|_| rng.random_range(-1.0..1.0)).collect(),
            value_targets: (0..steps).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        for seg in model.store.segments_mut() {
            for w in seg.data.iter_mut() {
                *w += rng.random_range(-0.01..0.01);
            }
        }
        (model, mb)
    }

    fn settings() -> LossSettings {
        LossSettings {
            clip_eps: 0.05,
            entropy_coef: 0.01,
            ranking_loss_coef: 1.0,
            normalize_advantages: true,
            use_ranking: true,
        }
    }

    fn grad_check(n: usize, steps: usize, seed: u64, pick: fn(&LossTerms) -> Var, groups: &[&str]) {
        grad_check_with(n, steps, seed, pick, groups, false)
    }

    fn grad_check_with(n: usize, steps: usize, seed: u64, pick: fn(&LossTerms) -> Var, groups: &[&str], scoring_grad: bool) {
        let (model, mb) = fixture_with(n, steps, seed, scoring_grad);
        let s = settings();
        let mut tape = Tape::new(&model.store);
        let terms = build_losses(&model, &mut tape, &mb, &s).unwrap();
        let grads = tape.backward(pick(&terms)).unwrap();
        let f = |m: &Pmat| -> Result<f64> {
            let mut t = Tape::new(&m.store);
            let terms = build_losses(m, &mut t, &mb, &s)?;
            Ok(t.scalar(pick(&terms)))
        };
        let res = check_gradient(&model, &grads, f, groups, 3).unwrap();
        assert!(res.checked > 20, "checked {}", res.checked);
        assert!(res.max_error < 1e-6, "max error {}", res.max_error);
    }

    #[test]
    fn encoder_loss_gradient() {
        grad_check(2, 3, 1, |t| t.encoder, &["encoder"]);
    }

    #[test]
    fn decoder_loss_gradient() {
        grad_check(2, 3, 2, |t| t.decoder, &["encoder", "decoder"]);
    }

    #[test]
    fn ranking_loss_gradient() {
        grad_check(3, 4, 3, |t| t.ranking.unwrap(), &["scoring"]);
    }

    #[test]
    fn total_loss_gradient() {
        // with the default stop-gradient the encoder's effect on the ranking
        // term is deliberately dropped, so only the full-flow variant is a
        // true derivative over every group
        grad_check_with(3, 4, 4, |t| t.total, &["encoder", "decoder", "scoring"], true);
        grad_check(3, 4, 4, |t| t.total, &["decoder", "scoring"]);
    }

    #[test]
    fn unbounded_clip_gives_vanilla_policy_gradient() {
        let (model, mb) = fixture(3, 5, 5);
        let (model, mb) = {
            // evaluate at the behavior parameters: re-collect log-probs
            let mut tape = Tape::new(&model.store);
            let enc = model.encode_on(&mut tape, mb.observation_tensor().unwrap()).unwrap();
            let dec = model.decode_train_on(&mut tape, enc.reps, &mb.orders, &mb.actions).unwrap();
            let mut mb = mb.clone();
            mb.behavior_log_probs = tape.value(dec.log_probs).data().to_vec();
            (model.clone(), mb)
        };
        let mut tape = Tape::new(&model.store);
        let enc = model.encode_on(&mut tape, mb.observation_tensor().unwrap()).unwrap();
        let dec = model.decode_train_on(&mut tape, enc.reps, &mb.orders, &mb.actions).unwrap();
        let l = decoder_loss(&mut tape, dec, &mb.behavior_log_probs, &mb.advantages, 1e12, 0.0).unwrap();
        let g1 = tape.backward(l).unwrap();

        let mut tape = Tape::new(&model.store);
        let enc = model.encode_on(&mut tape, mb.observation_tensor().unwrap()).unwrap();
        let dec = model.decode_train_on(&mut tape, enc.reps, &mb.orders, &mb.actions).unwrap();
        let a = column(&mut tape, repeat_each(&mb.advantages, 3));
        let weighted = tape.mul(dec.log_probs, a).unwrap();
        let m = tape.mean(weighted);
        let pg = tape.scale(m, -1.0);
        let g2 = tape.backward(pg).unwrap();
        for (x, y) in g1.grads.iter().flatten().zip(g2.grads.iter().flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(g2.global_norm() > 1e-3);
    }

    #[test]
    fn baselines_have_no_ranking_term() {
        let (model, mb) = fixture(2, 3, 6);
        let s = LossSettings {
            use_ranking: false,
            ..settings()
        };
        let mut tape = Tape::new(&model.store);
        let t = build_losses(&model, &mut tape, &mb, &s).unwrap();
        assert!(t.ranking.is_none());
        let g = tape.backward(t.total).unwrap();
        for (seg, g) in model.store.segments().iter().zip(&g.grads) {
            if seg.group() == "scoring" {
                assert!(g.iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn select_keeps_agent_blocks_together() {
        let (_, mb) = fixture(3, 4, 7);
        let s = mb.select(&[2, 0]);
        assert_eq!(s.len(), 2);
        assert_eq!(&s.behavior_log_probs[..3], &mb.behavior_log_probs[6..9]);
        assert_eq!(&s.behavior_log_probs[3..], &mb.behavior_log_probs[..3]);
        assert_eq!(s.orders[0], mb.orders[2]);
    }
}
