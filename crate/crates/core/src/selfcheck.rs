//! Runtime battery of correctness properties behind `plmarl selfcheck`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::TabularGame;
use crate::error::Result;
use crate::nn::Tape;
use crate::oracle::{exact_values, max_decomposition_residual, TabularPolicy};
use crate::pl::{all_permutations, pl_enumerate, pl_log_prob, pl_log_prob_grad, Permutation, PreferenceLogits};
use crate::policy::{Mode, ModelConfig, ObservationRepresentation, OrderingStrategy, Pmat};
use crate::train::{build_losses, check_gradient, gae, LossSettings, Minibatch};

/// Signature of the P-L score function under test.
pub type PlGradFn = fn(&PreferenceLogits, &Permutation) -> Result<Vec<f64>>;

#[derive(Debug, Clone, Copy)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Replaced by tests to confirm that a broken gradient is caught.
    pub pl_grad: PlGradFn,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            pl_grad: pl_log_prob_grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> PreferenceLogits {
    PreferenceLogits::new((0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).expect("finite")
}

fn random_order(rng: &mut ChaCha8Rng, n: usize) -> Permutation {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    Permutation::new(v).expect("shuffle is a permutation")
}

fn pl_normalization(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let z = random_logits(rng, 1 + k % 6);
        let total: f64 = pl_enumerate(&z)?.iter().map(|(_, p)| p).sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok((worst < 1e-9, format!("max |sum - 1| = {worst:.2e}")))
}

fn pl_gradient(rng: &mut ChaCha8Rng, grad: PlGradFn) -> Result<(bool, String)> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..300 {
        let n = 2 + k % 5;
        let z = random_logits(rng, n);
        let sigma = random_order(rng, n);
        let g = grad(&z, &sigma)?;
        for i in 0..n {
            let mut up = z.as_slice().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (pl_log_prob(&PreferenceLogits::new(up)?, &sigma)? - pl_log_prob(&PreferenceLogits::new(down)?, &sigma)?)
                / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(1.0));
        }
    }
    Ok((worst < 1e-6, format!("max error {worst:.2e}")))
}

fn pl_score_mean(rng: &mut ChaCha8Rng, grad: PlGradFn) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let n = 2 + k % 5;
        let z = random_logits(rng, n);
        let mut mean = vec![0.0; n];
        for (sigma, p) in pl_enumerate(&z)? {
            for (m, g) in mean.iter_mut().zip(grad(&z, &sigma)?) {
                *m += p * g;
            }
        }
        worst = worst.max(mean.iter().fold(0.0, |a: f64, x| a.max(x.abs())));
    }
    Ok((worst < 1e-9, format!("max |E[score]| = {worst:.2e}")))
}

fn decomposition(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..20 {
        let game = TabularGame::random(rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3), 0.9, rng);
        let values = exact_values(&game, &TabularPolicy::random(&game, rng))?;
        let (w, c) = max_decomposition_residual(&values, &game)?;
        worst = worst.max(w);
        checked += c;
    }
    Ok((worst < 1e-9, format!("max residual {worst:.2e} over {checked} cases")))
}

fn small_model(n: usize, rng: &mut ChaCha8Rng) -> Result<Pmat> {
    let mut cfg = ModelConfig::new(n, 3, 3);
    cfg.d_model = 8;
    cfg.heads = 2;
    let mut m = Pmat::new(cfg, rng)?;
    for name in ["decoder.head.out.weight", "scoring.out.weight"] {
        if let Some(id) = m.store.id(name) {
            m.store.get_mut(id).data.iter_mut().for_each(|w| *w *= 50.0);
        }
    }
    Ok(m)
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn causality(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut violations = 0;
    let mut cases = 0;
    for n in 2..=5 {
        let m = small_model(n, rng)?;
        let (reps, _) = m.encode(&random_obs(rng, n))?;
        for order in all_permutations(n) {
            let base: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let (lp, _) = m.decode_train(&reps, &order, &base)?;
            let pos = rng.random_range(0..n);
            let agent = order.as_slice()[pos];
            let mut changed = base.clone();
            changed[agent] = (changed[agent] + 1) % 3;
            let (lp2, _) = m.decode_train(&reps, &order, &changed)?;
            for &earlier in &order.as_slice()[..pos] {
                cases += 1;
                if lp[earlier].to_bits() != lp2[earlier].to_bits() {
                    violations += 1;
                }
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations in {cases} comparisons")))
}

fn train_infer(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for n in 2..=5 {
        let m = small_model(n, rng)?;
        for _ in 0..5 {
            let (reps, _): (ObservationRepresentation, _) = m.encode(&random_obs(rng, n))?;
            let order = random_order(rng, n);
            let (actions, lp_inf) = m.decode_infer(&reps, &order, rng, false)?;
            let (lp_train, _) = m.decode_train(&reps, &order, &actions)?;
            for (a, b) in lp_inf.iter().zip(&lp_train) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst < 1e-6, format!("max |difference| {worst:.2e}")))
}

/// Advantage at `t` as an explicit discounted sum of TD errors.
fn nested_sum_gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..n {
                let next = if dones[k] {
                    0.0
                } else if k + 1 < n {
                    values[k + 1]
                } else {
                    bootstrap
                };
                total += (gamma * lambda).powi((k - t) as i32) * (rewards[k] + gamma * next - values[k]);
                if dones[k] {
                    break;
                }
            }
            total
        })
        .collect()
}

fn gae_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..16);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boot = rng.random_range(-1.0..1.0);
        let (adv, _) = gae(&r, &v, &d, boot, 0.9, 0.95);
        for (a, b) in adv.iter().zip(nested_sum_gae(&r, &v, &d, boot, 0.9, 0.95)) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst < 1e-9, format!("max |difference| {worst:.2e}"))
}

fn loss_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let n = 3;
    let steps = 4;
    let mut model = small_model(n, rng)?;
    let obs: Vec<Vec<Vec<f64>>> = (0..steps).map(|_| random_obs(rng, n)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..steps).map(|i| ChaCha8Rng::seed_from_u64(i as u64)).collect();
    let recs = model.act(&obs, &OrderingStrategy::learned(), Mode::Train, &mut rngs)?;
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
        seg.data.iter_mut().for_each(|w| *w += rng.random_range(-0.01..0.01));
    }
    let s = LossSettings {
        clip_eps: 0.05,
        entropy_coef: 0.01,
        ranking_loss_coef: 1.0,
        normalize_advantages: true,
        use_ranking: true,
    };
    let mut tape = Tape::new(&model.store);
    let terms = build_losses(&model, &mut tape, &mb, &s)?;
    let grads = tape.backward(terms.total)?;
    let f = |m: &Pmat| -> Result<f64> {
        let mut t = Tape::new(&m.store);
        let terms = build_losses(m, &mut t, &mb, &s)?;
        Ok(t.scalar(terms.total))
    };
    let res = check_gradient(&model, &grads, f, &["decoder", "scoring"], 5)?;
    Ok((
        res.max_error < 1e-6,
        format!("max error {:.2e} over {} parameters", res.max_error, res.checked),
    ))
}

/// Run every property; each gets its own generator so results do not
/// depend on which others ran.
pub fn run_selfcheck(opts: &SelfcheckOptions) -> Vec<PropertyResult> {
    type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<(bool, String)>>;
    let grad = opts.pl_grad;
    let checks: Vec<(&'static str, Check)> = vec![
        ("pl-normalization", Box::new(pl_normalization)),
        ("pl-log-prob-gradient", Box::new(move |r: &mut ChaCha8Rng| pl_gradient(r, grad))),
        ("pl-score-zero-mean", Box::new(move |r: &mut ChaCha8Rng| pl_score_mean(r, grad))),
        ("advantage-decomposition", Box::new(decomposition)),
        ("decoder-causality", Box::new(causality)),
        ("train-infer-consistency", Box::new(train_infer)),
        ("gae-nested-sum", Box::new(|r: &mut ChaCha8Rng| Ok(gae_oracle(r)))),
        ("loss-gradients", Box::new(loss_gradients)),
    ];
    checks
        .into_iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            match check(&mut rng) {
                Ok((passed, detail)) => PropertyResult { name, passed, detail },
                Err(e) => PropertyResult {
                    name,
                    passed: false,
                    detail: format!("error: {e}"),
                },
            }
        })
        .collect()
}
