//! Layer building blocks on top of [`Tape`].

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::nn::params::{orthogonal_init, ParamId, ParameterStore};
use crate::nn::tape::{AttentionMask, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = xW + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Multi-head self-attention with input and output projections.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
}

/// Two dense layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Registers freshly initialized parameters in a store.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParameterStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Dense> {
        let w = orthogonal_init(fan_in, fan_out, gain, self.rng);
        let weight = self.store.add(&format!("{name}.weight"), vec![fan_in, fan_out], w)?;
        let bias = self.store.add(&format!("{name}.bias"), vec![fan_out], vec![0.0; fan_out])?;
        Ok(Dense {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let gain = self.store.add(&format!("{name}.gain"), vec![dim], vec![1.0; dim])?;
        let bias = self.store.add(&format!("{name}.bias"), vec![dim], vec![0.0; dim])?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn attention(&mut self, name: &str, d_model: usize, heads: usize) -> Result<SelfAttention> {
        if heads == 0 || d_model % heads != 0 {
            return arg_err(format!("d_model {d_model} not divisible by {heads} heads"));
        }
        Ok(SelfAttention {
            query: self.dense(&format!("{name}.query"), d_model, d_model, 1.0)?,
            key: self.dense(&format!("{name}.key"), d_model, d_model, 1.0)?,
            value: self.dense(&format!("{name}.value"), d_model, d_model, 1.0)?,
            output: self.dense(&format!("{name}.output"), d_model, d_model, 1.0)?,
            heads,
        })
    }

    pub fn mlp(&mut self, name: &str, d_in: usize, d_hidden: usize, d_out: usize, out_gain: f64) -> Result<Mlp> {
        Ok(Mlp {
            hidden: self.dense(&format!("{name}.hidden"), d_in, d_hidden, 1.0)?,
            out: self.dense(&format!("{name}.out"), d_hidden, d_out, out_gain)?,
        })
    }

    pub fn block(&mut self, name: &str, d_model: usize, heads: usize) -> Result<Block> {
        Ok(Block {
            ln_attn: self.layer_norm(&format!("{name}.ln_attn"), d_model)?,
            attn: self.attention(&format!("{name}.attn"), d_model, heads)?,
            ln_mlp: self.layer_norm(&format!("{name}.ln_mlp"), d_model)?,
            mlp: self.mlp(&format!("{name}.mlp"), d_model, d_model, d_model, 1.0)?,
        })
    }
}

pub fn dense_forward(tape: &mut Tape, layer: &Dense, x: Var) -> Result<Var> {
    if tape.value(x).cols() != layer.fan_in {
        return arg_err(format!(
            "dense: input width {} vs fan-in {}",
            tape.value(x).cols(),
            layer.fan_in
        ));
    }
    let w = tape.param(layer.weight);
    let b = tape.param(layer.bias);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub fn layer_norm_forward(tape: &mut Tape, ln: &LayerNorm, x: Var) -> Result<Var> {
    let g = tape.param(ln.gain);
    let b = tape.param(ln.bias);
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Self-attention over `x` of shape `[batch * seq, d_model]`.
pub fn attention_forward(
    tape: &mut Tape,
    layer: &SelfAttention,
    x: Var,
    seq: usize,
    masks: &[AttentionMask],
) -> Result<Var> {
    let q = dense_forward(tape, &layer.query, x)?;
    let k = dense_forward(tape, &layer.key, x)?;
    let v = dense_forward(tape, &layer.value, x)?;
    let o = tape.attention(q, k, v, seq, layer.heads, masks)?;
    dense_forward(tape, &layer.output, o)
}

pub fn mlp_forward(tape: &mut Tape, mlp: &Mlp, x: Var) -> Result<Var> {
    let h = dense_forward(tape, &mlp.hidden, x)?;
    let h = tape.gelu(h);
    dense_forward(tape, &mlp.out, h)
}

pub fn block_forward(tape: &mut Tape, block: &Block, x: Var, seq: usize, masks: &[AttentionMask]) -> Result<Var> {
    let h = layer_norm_forward(tape, &block.ln_attn, x)?;
    let h = attention_forward(tape, &block.attn, h, seq, masks)?;
    let x = tape.add(x, h)?;
    let h = layer_norm_forward(tape, &block.ln_mlp, x)?;
    let h = mlp_forward(tape, &block.mlp, h)?;
    tape.add(x, h)
}
