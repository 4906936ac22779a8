//! Plackett-Luce distribution over permutations.
//!
//! A ranking of `n` items is built by repeatedly choosing the next item from
//! the remaining ones with probability proportional to `exp(z_i)`:
//!
//! ```text
//! P(σ | z) = ∏_{i=1}^{n} exp(z_{σ(i)}) / Σ_{j=i}^{n} exp(z_{σ(j)})
//! ```
//!
//! All denominators are evaluated in log space after subtracting the maximum
//! of the active suffix, so arbitrarily shifted logits are handled exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Largest `n` accepted by [`pl_enumerate`].
pub const MAX_ENUMERATE: usize = 8;

/// Log-preferences of the Plackett-Luce model, one per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceLogits(Vec<f64>);

impl PreferenceLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return arg_err("preference logits must be non-empty");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return arg_err(format!("preference logit {i} is not finite"));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The positive weights `v_i = exp(z_i)`.
    pub fn weights(&self) -> Vec<f64> {
        self.0.iter().map(|z| z.exp()).collect()
    }
}

/// An ordering of agent indices `0..n`; `order[m]` is the agent acting at
/// position `m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &a in &order {
            if a >= n || seen[a] {
                return arg_err(format!("{order:?} is not a permutation of 0..{n}"));
            }
            seen[a] = true;
        }
        Ok(Self(order))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Inverse permutation: `ranks()[agent]` is the position of `agent`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.0.len()];
        for (pos, &a) in self.0.iter().enumerate() {
            r[a] = pos;
        }
        r
    }

    /// Reorder agent-indexed items into order-indexed items.
    pub fn to_order_indexed<T: Clone>(&self, agent_indexed: &[T]) -> Vec<T> {
        self.0.iter().map(|&a| agent_indexed[a].clone()).collect()
    }

    /// Inverse of [`Permutation::to_order_indexed`].
    pub fn to_agent_indexed<T: Clone>(&self, order_indexed: &[T]) -> Vec<T> {
        let ranks = self.ranks();
        ranks.iter().map(|&p| order_indexed[p].clone()).collect()
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// A sampled ordering together with its log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderSample {
    pub permutation: Permutation,
    pub log_prob: f64,
}

/// How [`pl_sample_with`] draws a permutation. Both are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMethod {
    /// Sort `z_i + G_i` descending with i.i.d. standard Gumbel noise.
    #[default]
    Gumbel,
    /// Successive softmax draws over the remaining items.
    Sequential,
}

fn check_pair(z: &PreferenceLogits, sigma: &Permutation) -> Result<()> {
    if z.len() != sigma.len() {
        return arg_err(format!(
            "logits have length {} but permutation has length {}",
            z.len(),
            sigma.len()
        ));
    }
    Ok(())
}

/// `lse[i] = log Σ_{j≥i} exp(z_{σ(j)})`, accumulated from the back with a
/// running maximum.
fn suffix_logsumexp(z: &[f64], sigma: &[usize]) -> Vec<f64> {
    let n = sigma.len();
    let mut lse = vec![0.0; n];
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for i in (0..n).rev() {
        let zi = z[sigma[i]];
        if zi > max {
            sum = sum * (max - zi).exp() + 1.0;
            max = zi;
        } else {
            sum += (zi - max).exp();
        }
        lse[i] = max + sum.ln();
    }
    lse
}

fn log_prob_unchecked(z: &[f64], sigma: &[usize]) -> f64 {
    let lse = suffix_logsumexp(z, sigma);
    // The final factor is exp(z)/exp(z) = 1; skip it to avoid rounding noise.
    let n = sigma.len();
    (0..n.saturating_sub(1)).map(|i| z[sigma[i]] - lse[i]).sum()
}

/// Natural log of `P(σ | z)`.
pub fn pl_log_prob(z: &PreferenceLogits, sigma: &Permutation) -> Result<f64> {
    check_pair(z, sigma)?;
    Ok(log_prob_unchecked(z.as_slice(), sigma.as_slice()))
}

/// Gradient of `log P(σ | z)` with respect to `z`, in O(n).
///
/// Component `σ(i)` is `1 - exp(z_{σ(i)}) Σ_{k≤i} 1 / Σ_{j≥k} exp(z_{σ(j)})`.
/// The prefix sum of reciprocal denominators is kept in log space.
pub fn pl_log_prob_grad(z: &PreferenceLogits, sigma: &Permutation) -> Result<Vec<f64>> {
    check_pair(z, sigma)?;
    Ok(log_prob_grad_unchecked(z.as_slice(), sigma.as_slice()))
}

pub(crate) fn log_prob_grad_unchecked(z: &[f64], sigma: &[usize]) -> Vec<f64> {
    let lse = suffix_logsumexp(z, sigma);
    let mut grad = vec![0.0; z.len()];
    // log Σ_{k≤i} exp(-lse[k])
    let mut log_prefix = f64::NEG_INFINITY;
    for (i, &agent) in sigma.iter().enumerate() {
        log_prefix = log_add_exp(log_prefix, -lse[i]);
        grad[agent] = 1.0 - (z[agent] + log_prefix).exp();
    }
    grad
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Draw one permutation with the default (Gumbel) sampler.
pub fn pl_sample<R: Rng + ?Sized>(z: &PreferenceLogits, rng: &mut R) -> OrderSample {
    pl_sample_with(z, SamplingMethod::Gumbel, rng)
}

pub fn pl_sample_with<R: Rng + ?Sized>(
    z: &PreferenceLogits,
    method: SamplingMethod,
    rng: &mut R,
) -> OrderSample {
    let zs = z.as_slice();
    let order = match method {
        SamplingMethod::Gumbel => {
            let keys: Vec<f64> = zs.iter().map(|&zi| zi + standard_gumbel(rng)).collect();
            let mut idx: Vec<usize> = (0..zs.len()).collect();
            idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
            idx
        }
        SamplingMethod::Sequential => {
            let mut remaining: Vec<usize> = (0..zs.len()).collect();
            let mut order = Vec::with_capacity(zs.len());
            while remaining.len() > 1 {
                let max = remaining.iter().map(|&a| zs[a]).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = remaining.iter().map(|&a| (zs[a] - max).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = remaining.len() - 1;
                for (k, wk) in w.iter().enumerate() {
                    if u < *wk {
                        pick = k;
                        break;
                    }
                    u -= wk;
                }
                order.push(remaining.remove(pick));
            }
            order.extend(remaining);
            order
        }
    };
    let log_prob = log_prob_unchecked(zs, &order);
    OrderSample {
        permutation: Permutation(order),
        log_prob,
    }
}

fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// The most probable ordering: indices sorted by descending logit, ties
/// broken by ascending index.
pub fn pl_mode(z: &PreferenceLogits) -> Permutation {
    let zs = z.as_slice();
    let mut idx: Vec<usize> = (0..zs.len()).collect();
    idx.sort_by(|&a, &b| zs[b].total_cmp(&zs[a]).then(a.cmp(&b)));
    Permutation(idx)
}

/// All `n!` permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(Permutation(cur.clone()));
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Every permutation with its exact probability (n ≤ 8).
pub fn pl_enumerate(z: &PreferenceLogits) -> Result<Vec<(Permutation, f64)>> {
    if z.len() > MAX_ENUMERATE {
        return Err(Error::Size(format!(
            "cannot enumerate {}! permutations (limit n = {MAX_ENUMERATE})",
            z.len()
        )));
    }
    Ok(all_permutations(z.len())
        .into_iter()
        .map(|p| {
            let lp = log_prob_unchecked(z.as_slice(), p.as_slice());
            (p, lp.exp())
        })
        .collect())
}

/// Score-function estimate of `∇_z E_σ[A(σ)]`:
/// `(1/N) Σ A(σ_i) ∇_z log P(σ_i | z)`.
pub fn estimate_order_objective_grad(
    z: &PreferenceLogits,
    samples: &[(Permutation, f64)],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return arg_err("order objective estimate needs at least one sample");
    }
    let mut acc = vec![0.0; z.len()];
    for (sigma, adv) in samples {
        let g = pl_log_prob_grad(z, sigma)?;
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += adv * gi;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Entropy of the distribution, by enumeration (n ≤ 8).
pub fn pl_entropy(z: &PreferenceLogits) -> Result<f64> {
    Ok(pl_enumerate(z)?
        .into_iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(_, p)| -p * p.ln())
        .sum())
}
