//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node that
//! holds its output value and whatever it needs for the backward sweep.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! for every parameter read through [`Tape::param`].

use std::collections::HashMap;

use crate::error::{arg_err, Result};
use crate::nn::params::{ParamId, ParameterStore};
use crate::nn::tensor::Tensor;
use crate::pl::{log_prob_grad_unchecked, Permutation};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which key positions each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    None,
    /// Token `i` attends to token `j` iff `j` comes no later than `i` in the
    /// given order.
    CausalByOrder(Permutation),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    PlLogProb(Var, Vec<Permutation>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-parameter gradients, aligned with the segments of a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            grads: store.segments().iter().map(|s| vec![0.0; s.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.index()]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= c);
    }
}

pub struct Tape<'a> {
    store: &'a ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is logically m×k, b is k×n; a transposed operand is stored k×m / n×k.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths match the logical shapes checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Read a parameter. Repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let seg = self.store.get(id);
        let t = Tensor::new(seg.shape().to_vec(), seg.data.clone()).expect("segment shape");
        let v = self.push(t, Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.input(t)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return arg_err(format!("matmul: [{m}, {k}] x [{k2}, {n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b)))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return arg_err(format!("add_bias: {} columns vs bias of {}", n, self.value(b).len()));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor::from_parts(m, n, out), Op::AddBias(x, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return arg_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "minimum", f64::min)?;
        Ok(self.push(t, Op::Minimum(a, b)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.map(x, |v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return arg_err(format!("layer_norm: width {n} vs gain/bias"));
        }
        let (xd, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Tensor::from_parts(m, n, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product multi-head attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d_model]`, rows grouped by sequence.
    /// `masks` holds either one mask shared by every sequence or one per
    /// sequence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        masks: &[AttentionMask],
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return arg_err("attention: q, k, v shapes differ");
        }
        if seq == 0 || rows % seq != 0 {
            return arg_err(format!("attention: {rows} rows not divisible by seq {seq}"));
        }
        if heads == 0 || d % heads != 0 {
            return arg_err(format!("attention: d_model {d} not divisible by {heads} heads"));
        }
        let batch = rows / seq;
        if masks.len() != 1 && masks.len() != batch {
            return arg_err(format!("attention: {} masks for {batch} sequences", masks.len()));
        }
        let ranks: Vec<Option<Vec<usize>>> = masks
            .iter()
            .map(|m| match m {
                AttentionMask::None => Ok(None),
                AttentionMask::CausalByOrder(p) if p.len() == seq => Ok(Some(p.ranks())),
                AttentionMask::CausalByOrder(p) => {
                    arg_err(format!("attention: mask order of length {} for seq {seq}", p.len()))
                }
            })
            .collect::<Result<_>>()?;

        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let rk = ranks[if ranks.len() == 1 { 0 } else { b }].as_deref();
            for h in 0..heads {
                let off = h * dk;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dk];
                    let allowed = |j: usize| rk.is_none_or(|r| r[j] <= r[i]);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if allowed(j) {
                            let kj = &kd[(b * seq + j) * d + off..][..dk];
                            let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        if allowed(j) {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let o = &mut out[(b * seq + i) * d + off..][..dk];
                    for j in 0..seq {
                        if allowed(j) {
                            p[j] /= total;
                            let vj = &vd[(b * seq + j) * d + off..][..dk];
                            o.iter_mut().zip(vj).for_each(|(o, v)| *o += p[j] * v);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(rows, d, out),
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Attention weights of an attention node, laid out
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        self.push(Tensor::from_parts(m, n, out), Op::LogSoftmax(x))
    }

    /// Rows of `x` selected (with repetition) by `indices`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return arg_err(format!("gather_rows: index {bad} out of {m} rows"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&xd[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::from_parts(indices.len(), n, out),
            Op::GatherRows(x, indices.to_vec()),
        ))
    }

    /// `out[r] = x[r, cols[r]]`, shape `[rows, 1]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if cols.len() != m {
            return arg_err(format!("pick_cols: {} indices for {m} rows", cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return arg_err(format!("pick_cols: column {bad} out of {n}"));
        }
        let xd = self.value(x).data();
        let out = cols.iter().enumerate().map(|(r, &c)| xd[r * n + c]).collect();
        Ok(self.push(Tensor::from_parts(m, 1, out), Op::PickCols(x, cols.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.len() != rows * cols {
            return arg_err(format!("reshape: {} elements into [{rows}, {cols}]", t.len()));
        }
        let t = Tensor::from_parts(rows, cols, t.data().to_vec());
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xd = self.value(x).data();
        let out = (0..m).map(|r| xd[r * n..(r + 1) * n].iter().sum()).collect();
        self.push(Tensor::from_parts(m, 1, out), Op::RowSum(x))
    }

    /// Plackett-Luce log-probability of `orders[b]` under logits row `b` of
    /// `credits` (`[batch, n]`); output `[batch, 1]`.
    pub fn pl_log_prob(&mut self, credits: Var, orders: &[Permutation]) -> Result<Var> {
        let (m, n) = self.dims(credits);
        if orders.len() != m || orders.iter().any(|o| o.len() != n) {
            return arg_err(format!("pl_log_prob: {} orders for credits [{m}, {n}]", orders.len()));
        }
        let cd = self.value(credits).data();
        let mut out = Vec::with_capacity(m);
        for (r, o) in orders.iter().enumerate() {
            let z = crate::pl::PreferenceLogits::new(cd[r * n..(r + 1) * n].to_vec())?;
            out.push(crate::pl::pl_log_prob(&z, o)?);
        }
        Ok(self.push(Tensor::from_parts(m, 1, out), Op::PlLogProb(credits, orders.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return arg_err(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                let len = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads[id.index()].iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &|s| gemm(m, n, k, &g, false, bd, true, s, true));
                    acc(*b, &|s| gemm(k, m, n, ad, true, &g, false, s, true));
                }
                Op::AddBias(x, b) => {
                    let n = self.dims(*x).1;
                    acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &|s| {
                        for row in g.chunks(n) {
                            s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g));
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * bd[i];
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * ad[i];
                        }
                    });
                }
                Op::Minimum(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            if ad[i] <= bd[i] {
                                s[i] += g[i];
                            }
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            if ad[i] > bd[i] {
                                s[i] += g[i];
                            }
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += c * g)),
                Op::AddScalar(x) => acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g)),
                Op::Gelu(x) => {
                    let xd = self.value(*x).data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * gelu_grad(xd[i]);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let yd = node.value.data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * (1.0 - yd[i] * yd[i]);
                        }
                    });
                }
                Op::Exp(x) => {
                    let yd = node.value.data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * yd[i];
                        }
                    });
                }
                Op::Clamp(x, lo, hi) => {
                    let xd = self.value(*x).data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            if xd[i] >= *lo && xd[i] <= *hi {
                                s[i] += g[i];
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = self.dims(*x);
                    let gd = self.value(*gain).data();
                    acc(*gain, &|s| {
                        for r in 0..m {
                            for c in 0..n {
                                s[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    });
                    acc(*bias, &|s| {
                        for row in g.chunks(n) {
                            s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    });
                    acc(*x, &|s| {
                        let nf = n as f64;
                        for r in 0..m {
                            let dxh: Vec<f64> = (0..n).map(|c| g[r * n + c] * gd[c]).collect();
                            let sum_d: f64 = dxh.iter().sum();
                            let sum_dx: f64 = (0..n).map(|c| dxh[c] * xhat[r * n + c]).sum();
                            for c in 0..n {
                                s[r * n + c] += inv_std[r] / nf
                                    * (nf * dxh[c] - sum_d - xhat[r * n + c] * sum_dx);
                            }
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq,
                    heads,
                    probs,
                } => {
                    let (seq, heads) = (*seq, *heads);
                    let (rows, d) = self.dims(*q);
                    let batch = rows / seq;
                    let dk = d / heads;
                    let scale = 1.0 / (dk as f64).sqrt();
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut dq = vec![0.0; rows * d];
                    let mut dkk = vec![0.0; rows * d];
                    let mut dv = vec![0.0; rows * d];
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = h * dk;
                            for i in 0..seq {
                                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                                let go = &g[(b * seq + i) * d + off..][..dk];
                                let mut dot = 0.0;
                                for j in 0..seq {
                                    if p[j] == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let row_j = (b * seq + j) * d + off;
                                    let vj = &vd[row_j..][..dk];
                                    dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                    dot += p[j] * dp[j];
                                    for (t, gv) in go.iter().enumerate() {
                                        dv[row_j + t] += p[j] * gv;
                                    }
                                }
                                let row_i = (b * seq + i) * d + off;
                                for j in 0..seq {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    let row_j = (b * seq + j) * d + off;
                                    for t in 0..dk {
                                        dq[row_i + t] += ds * kd[row_j + t];
                                        dkk[row_j + t] += ds * qd[row_i + t];
                                    }
                                }
                            }
                        }
                    }
                    acc(*q, &|s| s.iter_mut().zip(&dq).for_each(|(s, g)| *s += g));
                    acc(*k, &|s| s.iter_mut().zip(&dkk).for_each(|(s, g)| *s += g));
                    acc(*v, &|s| s.iter_mut().zip(&dv).for_each(|(s, g)| *s += g));
                }
                Op::LogSoftmax(x) => {
                    let (m, n) = self.dims(*x);
                    let yd = node.value.data();
                    acc(*x, &|s| {
                        for r in 0..m {
                            let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                            for c in 0..n {
                                s[r * n + c] += g[r * n + c] - yd[r * n + c].exp() * gs;
                            }
                        }
                    });
                }
                Op::GatherRows(x, indices) => {
                    let n = self.dims(*x).1;
                    acc(*x, &|s| {
                        for (r, &i) in indices.iter().enumerate() {
                            for c in 0..n {
                                s[i * n + c] += g[r * n + c];
                            }
                        }
                    });
                }
                Op::PickCols(x, cols) => {
                    let n = self.dims(*x).1;
                    acc(*x, &|s| {
                        for (r, &c) in cols.iter().enumerate() {
                            s[r * n + c] += g[r];
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g)),
                Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
                Op::Mean(x) => {
                    let len = self.value(*x).len().max(1) as f64;
                    acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0] / len));
                }
                Op::RowSum(x) => {
                    let n = self.dims(*x).1;
                    acc(*x, &|s| {
                        for (r, row) in s.chunks_mut(n).enumerate() {
                            row.iter_mut().for_each(|s| *s += g[r]);
                        }
                    });
                }
                Op::PlLogProb(x, orders) => {
                    let n = self.dims(*x).1;
                    let xd = self.value(*x).data();
                    acc(*x, &|s| {
                        for (r, o) in orders.iter().enumerate() {
                            let gr = log_prob_grad_unchecked(&xd[r * n..(r + 1) * n], o.as_slice());
                            for c in 0..n {
                                s[r * n + c] += g[r] * gr[c];
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central finite-difference check of every parameter scalar.
    fn check_grads(store: &ParameterStore, f: impl Fn(&mut Tape) -> Var, tol: f64) {
        let tape_grads = {
            let mut t = Tape::new(store);
            let l = f(&mut t);
            t.backward(l).unwrap()
        };
        let h = 1e-5;
        let mut probe = store.clone();
        for id in store.ids() {
            for i in 0..store.get(id).data.len() {
                let orig = probe.get(id).data[i];
                probe.get_mut(id).data[i] = orig + h;
                let up = {
                    let mut t = Tape::new(&probe);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                probe.get_mut(id).data[i] = orig - h;
                let dn = {
                    let mut t = Tape::new(&probe);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                probe.get_mut(id).data[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = tape_grads.get(id)[i];
                let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
                assert!(err < tol, "{} [{i}]: analytic {an} vs fd {fd}", store.get(id).name);
            }
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParameterStore::new();
        let a = s.add("a", vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        let b = s.add("b", vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        check_grads(
            &s,
            |t| {
                let (a, b) = (t.param(a), t.param(b));
                let m = t.mul(a, b).unwrap();
                let g = t.gelu(m);
                let th = t.tanh(b);
                let e = t.exp(th);
                let c = t.clamp(a, -0.5, 0.5);
                let mn = t.minimum(e, c).unwrap();
                let x = t.add(g, mn).unwrap();
                let y = t.sub(x, a).unwrap();
                let y = t.scale(y, 1.7);
                let y = t.add_scalar(y, 0.3);
                let ls = t.log_softmax(y);
                let r = t.row_sum(ls);
                let sq = t.square(r);
                t.mean(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_layernorm_gather_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParameterStore::new();
        let x = s.add("x", vec![4, 3], rand_vec(&mut rng, 12)).unwrap();
        let w = s.add("w", vec![3, 5], rand_vec(&mut rng, 15)).unwrap();
        let b = s.add("b", vec![5], rand_vec(&mut rng, 5)).unwrap();
        let g = s.add("g", vec![5], rand_vec(&mut rng, 5)).unwrap();
        let beta = s.add("beta", vec![5], rand_vec(&mut rng, 5)).unwrap();
        check_grads(
            &s,
            |t| {
                let (x, w, b, g, beta) = (t.param(x), t.param(w), t.param(b), t.param(g), t.param(beta));
                let y = t.matmul(x, w).unwrap();
                let y = t.add_bias(y, b).unwrap();
                let y = t.layer_norm(y, g, beta, 1e-5).unwrap();
                let y = t.gather_rows(y, &[3, 0, 0, 2]).unwrap();
                let p = t.pick_cols(y, &[4, 1, 0, 2]).unwrap();
                let r = t.reshape(p, 2, 2).unwrap();
                let sq = t.square(r);
                let tot = t.sum(sq);
                let other = t.sum(y);
                t.add(tot, other).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn attention_gradcheck_masked_and_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParameterStore::new();
        let (seq, d) = (4, 6);
        let q = s.add("q", vec![2 * seq, d], rand_vec(&mut rng, 2 * seq * d)).unwrap();
        let k = s.add("k", vec![2 * seq, d], rand_vec(&mut rng, 2 * seq * d)).unwrap();
        let v = s.add("v", vec![2 * seq, d], rand_vec(&mut rng, 2 * seq * d)).unwrap();
        let w = s.add("w", vec![2 * seq, d], rand_vec(&mut rng, 2 * seq * d)).unwrap();
        let masks = [
            AttentionMask::CausalByOrder(Permutation::new(vec![2, 0, 3, 1]).unwrap()),
            AttentionMask::None,
        ];
        check_grads(
            &s,
            |t| {
                let (q, k, v, w) = (t.param(q), t.param(k), t.param(v), t.param(w));
                let o = t.attention(q, k, v, seq, 2, &masks).unwrap();
                let o = t.mul(o, w).unwrap();
                t.sum(o)
            },
            1e-6,
        );
    }

    #[test]
    fn pl_log_prob_node_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParameterStore::new();
        let c = s.add("c", vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        let orders = vec![
            Permutation::new(vec![3, 1, 0, 2]).unwrap(),
            Permutation::identity(4),
            Permutation::new(vec![2, 3, 1, 0]).unwrap(),
        ];
        check_grads(
            &s,
            |t| {
                let c = t.param(c);
                let lp = t.pl_log_prob(c, &orders).unwrap();
                let e = t.exp(lp);
                t.sum(e)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_rows_sum_to_one_and_respect_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ParameterStore::new();
        let mut t = Tape::new(&s);
        let x = t.input(Tensor::new(vec![5, 4], rand_vec(&mut rng, 20)).unwrap());
        let order = Permutation::new(vec![4, 2, 0, 1, 3]).unwrap();
        let o = t.attention(x, x, x, 5, 2, &[AttentionMask::CausalByOrder(order.clone())]).unwrap();
        let probs = t.attention_probs(o).unwrap();
        let ranks = order.ranks();
        for h in 0..2 {
            for i in 0..5 {
                let row = &probs[(h * 5 + i) * 5..][..5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..5 {
                    if ranks[j] > ranks[i] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let s = ParameterStore::new();
        let mut t = Tape::new(&s);
        let a = t.input(Tensor::zeros(vec![2, 3]));
        let b = t.input(Tensor::zeros(vec![2, 3]));
        assert!(t.matmul(a, b).is_err());
        assert!(t.attention(a, a, a, 2, 2, &[AttentionMask::None]).is_err());
        assert!(t.attention(a, a, a, 4, 1, &[AttentionMask::None]).is_err());
        assert!(t.gather_rows(a, &[2]).is_err());
        assert!(t.pick_cols(a, &[0]).is_err());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn backward_constant_and_quadratic() {
        let mut s = ParameterStore::new();
        let p = s.add("p", vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let unused = s.add("unused", vec![2], vec![9.0, 9.0]).unwrap();

        let mut t = Tape::new(&s);
        let c = t.input(Tensor::scalar(3.0));
        let g = t.backward(c).unwrap();
        assert!(g.grads.iter().flatten().all(|&x| x == 0.0));

        let mut t = Tape::new(&s);
        let x = t.param(p);
        let sq = t.square(x);
        let sum = t.sum(sq);
        let l = t.scale(sum, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p), s.get(p).data.as_slice());
        assert_eq!(g.get(unused), &[0.0, 0.0]);
    }
}
