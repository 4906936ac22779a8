use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::io::write_atomic;
use crate::nn::layers::{layer_norm_forward, mlp_forward};
use crate::nn::params::orthogonal_init;
use crate::nn::{block_forward, dense_forward, AttentionMask, Block, Dense, LayerNorm, Mlp, ParamBuilder, ParamId};
use crate::nn::{ParameterStore, Tape, Tensor, Var};
use crate::pl::{Permutation, PreferenceLogits};
use crate::policy::config::ModelConfig;
use crate::policy::ordering::{select_order, DecisionCredits, Mode, OrderingStrategy};

/// Encoder output for one step, `[n_agents, d_model]` in agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRepresentation(pub Tensor);

/// Everything recorded about one decision step. All vectors are indexed
/// by agent id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointActionRecord {
    pub order: Permutation,
    pub actions: Vec<usize>,
    pub per_agent_log_probs: Vec<f64>,
    pub order_log_prob: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Layout {
    obs_ln: LayerNorm,
    obs_embed: Dense,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    value_head: Mlp,
    scoring: Mlp,
    action_embed: ParamId,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    policy_head: Mlp,
}

/// Tape handles for a batched encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[batch * n_agents, d_model]`.
    pub reps: Var,
    /// `[batch * n_agents, 1]`.
    pub values: Var,
}

/// Tape handles for a teacher-forced decoder pass, rows in agent order.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[batch * n_agents, 1]`.
    pub log_probs: Var,
    /// `[batch * n_agents, 1]`.
    pub entropies: Var,
}

/// Permutation-aware multi-agent transformer.
#[derive(Debug, Clone)]
pub struct Pmat {
    config: ModelConfig,
    pub store: ParameterStore,
    layout: Layout,
}

impl Pmat {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let layout = build(&config, &mut store, rng)?;
        Ok(Self { config, store, layout })
    }

    /// Wrap loaded parameters; names and shapes must match `config`.
    pub fn from_store(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        let mut model = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.store.load_values_from(&store)?;
        model.store.step_count = store.step_count;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn config_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Write the checkpoint to `path` and the config to `path` with a
    /// `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(&Self::config_path(path), serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        self.store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = Self::config_path(path);
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Format(format!("reading model config {}: {e}", cfg_path.display())))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let store = ParameterStore::load(path)?;
        Self::from_store(config, store)
    }

    fn check_obs(&self, obs: &Tensor) -> Result<usize> {
        let (n, d) = (self.config.n_agents, self.config.obs_dim);
        if obs.cols() != d || obs.rows() % n != 0 || obs.rows() == 0 {
            return arg_err(format!(
                "observations {:?} do not fit {n} agents x {d} features",
                obs.shape()
            ));
        }
        Ok(obs.rows() / n)
    }

    /// Encode `obs` of shape `[batch * n_agents, obs_dim]`.
    pub fn encode_on(&self, tape: &mut Tape, obs: Tensor) -> Result<EncoderOutput> {
        self.check_obs(&obs)?;
        let l = &self.layout;
        let x = tape.input(obs);
        let x = layer_norm_forward(tape, &l.obs_ln, x)?;
        let x = dense_forward(tape, &l.obs_embed, x)?;
        let mut x = tape.gelu(x);
        for b in &l.enc_blocks {
            x = block_forward(tape, b, x, self.config.n_agents, &[AttentionMask::None])?;
        }
        let reps = layer_norm_forward(tape, &l.enc_ln, x)?;
        let values = mlp_forward(tape, &l.value_head, reps)?;
        Ok(EncoderOutput { reps, values })
    }

    /// Decision credits `[batch, n_agents]`.
    pub fn credits_on(&self, tape: &mut Tape, reps: Var) -> Result<Var> {
        let src = if self.config.scoring_grad_to_encoder {
            reps
        } else {
            tape.detach(reps)
        };
        let c = mlp_forward(tape, &self.layout.scoring, src)?;
        let batch = tape.value(c).rows() / self.config.n_agents;
        tape.reshape(c, batch, self.config.n_agents)
    }

    /// Log-policy `[batch * len, n_actions]` for the first `len` positions
    /// of each order. `tokens[b * len + m]` is the action token fed at
    /// position `m` (the start token at `m = 0`).
    fn decoder_log_policy(&self, tape: &mut Tape, reps: Var, orders: &[Permutation], tokens: &[usize], len: usize) -> Result<Var> {
        let n = self.config.n_agents;
        let mut idx = Vec::with_capacity(orders.len() * len);
        for (b, o) in orders.iter().enumerate() {
            idx.extend(o.as_slice()[..len].iter().map(|&a| b * n + a));
        }
        let l = &self.layout;
        let r = tape.gather_rows(reps, &idx)?;
        let table = tape.param(l.action_embed);
        let e = tape.gather_rows(table, tokens)?;
        let mut x = tape.add(r, e)?;
        let mask = [AttentionMask::CausalByOrder(Permutation::identity(len))];
        for b in &l.dec_blocks {
            x = block_forward(tape, b, x, len, &mask)?;
        }
        let x = layer_norm_forward(tape, &l.dec_ln, x)?;
        let logits = mlp_forward(tape, &l.policy_head, x)?;
        Ok(tape.log_softmax(logits))
    }

    fn start_token(&self) -> usize {
        self.config.n_actions
    }

    fn check_orders(&self, reps: Var, tape: &Tape, orders: &[Permutation]) -> Result<()> {
        let n = self.config.n_agents;
        if tape.value(reps).rows() != orders.len() * n || orders.iter().any(|o| o.len() != n) {
            return arg_err(format!(
                "{} orders for {} representation rows of {n} agents",
                orders.len(),
                tape.value(reps).rows()
            ));
        }
        Ok(())
    }

    /// Teacher-forced decoding of all positions in parallel.
    /// `actions[b]` is indexed by agent id.
    pub fn decode_train_on(
        &self,
        tape: &mut Tape,
        reps: Var,
        orders: &[Permutation],
        actions: &[Vec<usize>],
    ) -> Result<DecoderOutput> {
        let n = self.config.n_agents;
        self.check_orders(reps, tape, orders)?;
        if actions.len() != orders.len()
            || actions.iter().any(|a| a.len() != n || a.iter().any(|&x| x >= self.config.n_actions))
        {
            return arg_err("decode_train: malformed joint actions");
        }
        let mut tokens = Vec::with_capacity(orders.len() * n);
        let mut taken = Vec::with_capacity(orders.len() * n);
        for (o, a) in orders.iter().zip(actions) {
            tokens.push(self.start_token());
            for m in 0..n {
                if m + 1 < n {
                    tokens.push(a[o.as_slice()[m]]);
                }
                taken.push(a[o.as_slice()[m]]);
            }
        }
        let lp = self.decoder_log_policy(tape, reps, orders, &tokens, n)?;
        let picked = tape.pick_cols(lp, &taken)?;
        let p = tape.exp(lp);
        let plogp = tape.mul(p, lp)?;
        let neg_ent = tape.row_sum(plogp);
        let ent = tape.scale(neg_ent, -1.0);
        // back to agent order
        let mut back = Vec::with_capacity(orders.len() * n);
        for (b, o) in orders.iter().enumerate() {
            back.extend(o.ranks().iter().map(|&r| b * n + r));
        }
        Ok(DecoderOutput {
            log_probs: tape.gather_rows(picked, &back)?,
            entropies: tape.gather_rows(ent, &back)?,
        })
    }

    /// Autoregressive decoding over growing prefixes. Returns agent-indexed
    /// actions and their log-probabilities for each batch element.
    /// Deterministic decoding takes the argmax, ties to the lowest action.
    pub fn decode_infer_on<R: Rng>(
        &self,
        tape: &mut Tape,
        reps: Var,
        orders: &[Permutation],
        rngs: &mut [R],
        deterministic: bool,
    ) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
        let n = self.config.n_agents;
        self.check_orders(reps, tape, orders)?;
        if !deterministic && rngs.len() != orders.len() {
            return arg_err(format!("{} rngs for {} batch elements", rngs.len(), orders.len()));
        }
        let batch = orders.len();
        let mut chosen: Vec<Vec<usize>> = vec![Vec::with_capacity(n); batch];
        let mut out = vec![(vec![0usize; n], vec![0.0; n]); batch];
        for m in 0..n {
            let len = m + 1;
            let mut tokens = Vec::with_capacity(batch * len);
            for c in &chosen {
                tokens.push(self.start_token());
                tokens.extend_from_slice(c);
            }
            let lp = self.decoder_log_policy(tape, reps, orders, &tokens, len)?;
            let lp = tape.value(lp).clone();
            for b in 0..batch {
                let row = lp.row(b * len + m);
                let a = if deterministic {
                    argmax(row)
                } else {
                    sample_categorical(row, &mut rngs[b])
                };
                chosen[b].push(a);
                let agent = orders[b].as_slice()[m];
                out[b].0[agent] = a;
                out[b].1[agent] = row[a];
            }
        }
        Ok(out)
    }

    /// Encode one step's observations (`[n_agents][obs_dim]`); returns the
    /// representation and per-agent values.
    pub fn encode(&self, obs: &[Vec<f64>]) -> Result<(ObservationRepresentation, Vec<f64>)> {
        let mut tape = Tape::new(&self.store);
        let e = self.encode_on(&mut tape, Tensor::from_rows(obs)?)?;
        Ok((
            ObservationRepresentation(tape.value(e.reps).clone()),
            tape.value(e.values).data().to_vec(),
        ))
    }

    pub fn score_credits(&self, reps: &ObservationRepresentation) -> Result<DecisionCredits> {
        let mut tape = Tape::new(&self.store);
        let r = self.rep_input(&mut tape, reps)?;
        let c = self.credits_on(&mut tape, r)?;
        Ok(DecisionCredits(PreferenceLogits::new(tape.value(c).data().to_vec())?))
    }

    fn rep_input(&self, tape: &mut Tape, reps: &ObservationRepresentation) -> Result<Var> {
        let t = &reps.0;
        if t.rows() != self.config.n_agents || t.cols() != self.config.d_model {
            return arg_err(format!("representation shape {:?}", t.shape()));
        }
        Ok(tape.input(t.clone()))
    }

    /// Per-agent log-probabilities and entropies of `actions` generated in
    /// `order`, all agent-indexed.
    pub fn decode_train(
        &self,
        reps: &ObservationRepresentation,
        order: &Permutation,
        actions: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.store);
        let r = self.rep_input(&mut tape, reps)?;
        let d = self.decode_train_on(&mut tape, r, std::slice::from_ref(order), &[actions.to_vec()])?;
        Ok((
            tape.value(d.log_probs).data().to_vec(),
            tape.value(d.entropies).data().to_vec(),
        ))
    }

    /// Generate actions one agent at a time following `order`.
    pub fn decode_infer<R: Rng>(
        &self,
        reps: &ObservationRepresentation,
        order: &Permutation,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut tape = Tape::new(&self.store);
        let r = self.rep_input(&mut tape, reps)?;
        let mut out = self.decode_infer_on(&mut tape, r, std::slice::from_ref(order), std::slice::from_mut(rng), deterministic)?;
        Ok(out.pop().expect("one element"))
    }

    /// Mean per-agent value for each element of a batch of observations.
    pub fn mean_values(&self, obs: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        let n = self.config.n_agents;
        let rows: Vec<Vec<f64>> = obs.iter().flatten().cloned().collect();
        if obs.is_empty() || rows.len() != obs.len() * n {
            return arg_err(format!("mean_values: expected {n} agents per observation"));
        }
        let mut tape = Tape::new(&self.store);
        let e = self.encode_on(&mut tape, Tensor::from_rows(&rows)?)?;
        Ok(tape
            .value(e.values)
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect())
    }

    /// Full decision step for a batch of environments. `obs[b]` is
    /// `[n_agents][obs_dim]`; `rngs[b]` drives order and action sampling
    /// for element `b`.
    pub fn act<R: Rng>(
        &self,
        obs: &[Vec<Vec<f64>>],
        strategy: &OrderingStrategy,
        mode: Mode,
        rngs: &mut [R],
    ) -> Result<Vec<JointActionRecord>> {
        if obs.is_empty() || rngs.len() != obs.len() {
            return arg_err(format!("act: {} observations, {} rngs", obs.len(), rngs.len()));
        }
        let n = self.config.n_agents;
        let rows: Vec<Vec<f64>> = obs.iter().flatten().cloned().collect();
        if rows.len() != obs.len() * n {
            return arg_err(format!("act: expected {n} agents per observation"));
        }
        let mut tape = Tape::new(&self.store);
        let enc = self.encode_on(&mut tape, Tensor::from_rows(&rows)?)?;
        let credits = self.credits_on(&mut tape, enc.reps)?;
        let cv = tape.value(credits).clone();
        let mut orders = Vec::with_capacity(obs.len());
        for (b, rng) in rngs.iter_mut().enumerate() {
            let z = DecisionCredits(PreferenceLogits::new(cv.row(b).to_vec())?);
            orders.push(select_order(&z, strategy, mode, rng)?);
        }
        let perms: Vec<Permutation> = orders.iter().map(|o| o.permutation.clone()).collect();
        let decoded = self.decode_infer_on(&mut tape, enc.reps, &perms, rngs, mode == Mode::Infer)?;
        let values = tape.value(enc.values).data().to_vec();
        Ok(orders
            .into_iter()
            .zip(decoded)
            .enumerate()
            .map(|(b, (o, (actions, lps)))| JointActionRecord {
                order: o.permutation,
                actions,
                per_agent_log_probs: lps,
                order_log_prob: o.log_prob,
                values: values[b * n..(b + 1) * n].to_vec(),
            })
            .collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass past the last bucket
    log_probs.len() - 1
}

fn build<R: Rng>(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Layout> {
    let d = cfg.d_model;
    let mut pb = ParamBuilder { store, rng };
    let obs_ln = pb.layer_norm("encoder.obs_ln", cfg.obs_dim)?;
    let obs_embed = pb.dense("encoder.obs_embed", cfg.obs_dim, d, 1.0)?;
    let enc_blocks = (0..cfg.blocks)
        .map(|i| pb.block(&format!("encoder.block{i}"), d, cfg.heads))
        .collect::<Result<Vec<_>>>()?;
    let enc_ln = pb.layer_norm("encoder.ln", d)?;
    let value_head = pb.mlp("encoder.value_head", d, d, 1, 1.0)?;
    let scoring = pb.mlp("scoring", d, d, 1, 0.01)?;
    let table = orthogonal_init(cfg.n_actions + 1, d, 1.0, pb.rng);
    let action_embed = pb.store.add("decoder.action_embed", vec![cfg.n_actions + 1, d], table)?;
    let dec_blocks = (0..cfg.blocks)
        .map(|i| pb.block(&format!("decoder.block{i}"), d, cfg.heads))
        .collect::<Result<Vec<_>>>()?;
    let dec_ln = pb.layer_norm("decoder.ln", d)?;
    let policy_head = pb.mlp("decoder.head", d, d, cfg.n_actions, 0.01)?;
    Ok(Layout {
        obs_ln,
        obs_embed,
        enc_blocks,
        enc_ln,
        value_head,
        scoring,
        action_embed,
        dec_blocks,
        dec_ln,
        policy_head,
    })
}
