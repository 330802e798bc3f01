//! Multi-head scaled dot-product attention and the attention block used at
//! every pyramid level.
//!
//! The block wiring is an approximation of a Transformer-style unit with
//! three attention sublayers and a two-layer feed-forward network:
//!
//! ```text
//! x = LN(q + MHA(q, k, k))      cross-attention, keys double as values
//! x = LN(x + MHA(x, x, x))      self-attention
//! x = LN(x + MHA(x, x, x))      self-attention
//! x = LN(x + W2 relu(W1 x))     position-wise feed-forward
//! ```
//!
//! No masking is applied; every query attends to every key.

use rand::Rng;

use crate::error::{shape_err, ApnError, Result};
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::DType;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSlots {
    pub query: usize,
    pub key: usize,
    pub value: usize,
}

/// Slots of one multi-head attention layer inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MhaParams {
    pub heads: Vec<HeadSlots>,
    pub out_weight: usize,
    pub out_bias: usize,
    pub model_dim: usize,
}

impl MhaParams {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        model_dim: usize,
        head_count: usize,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(ApnError::Config(format!(
                "model dim {model_dim} is not divisible by head count {head_count}"
            )));
        }
        let dh = model_dim / head_count;
        let mut heads = Vec::with_capacity(head_count);
        for h in 0..head_count {
            heads.push(HeadSlots {
                query: params.weight(&format!("{prefix}.h{h}.wq"), model_dim, dh, dtype, rng)?,
                key: params.weight(&format!("{prefix}.h{h}.wk"), model_dim, dh, dtype, rng)?,
                value: params.weight(&format!("{prefix}.h{h}.wv"), model_dim, dh, dtype, rng)?,
            });
        }
        let out_weight = params.weight(&format!("{prefix}.wo"), model_dim, model_dim, dtype, rng)?;
        let out_bias = params.filled(&format!("{prefix}.bo"), &[model_dim], 0.0, dtype)?;
        Ok(MhaParams { heads, out_weight, out_bias, model_dim })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.len()
    }
}

fn check_seq(tape: &Tape, v: Var, d: usize, what: &str) -> Result<usize> {
    let dims = tape.dims(v);
    if dims.len() != 2 || dims[1] != d {
        return Err(shape_err!("{what} must be [T, {d}], got {dims:?}"));
    }
    Ok(dims[0])
}

/// `concat_h softmax((q Wq_h)(k Wk_h)ᵀ / √d_h)(v Wv_h) · Wo + bo`.
pub fn multi_head_attention(
    tape: &Tape,
    query: Var,
    key: Var,
    value: Var,
    p: &MhaParams,
    bound: &Bound,
) -> Result<Var> {
    let d = p.model_dim;
    check_seq(tape, query, d, "query")?;
    let tk = check_seq(tape, key, d, "key")?;
    if check_seq(tape, value, d, "value")? != tk {
        return Err(shape_err!("key and value lengths differ"));
    }
    let scale = 1.0 / (p.head_dim() as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let q = tape.matmul(query, bound.var(h.query))?;
        let k = tape.matmul(key, bound.var(h.key))?;
        let v = tape.matmul(value, bound.var(h.value))?;
        let kt = tape.transpose(k)?;
        let scores = tape.scale(tape.matmul(q, kt)?, scale)?;
        let weights = tape.softmax_lastdim(scores)?;
        outs.push(tape.matmul(weights, v)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let projected = tape.matmul(joined, bound.var(p.out_weight))?;
    tape.add_bias(projected, bound.var(p.out_bias))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormSlots {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNormSlots {
    fn init(params: &mut ParamSet, prefix: &str, d: usize, dtype: DType) -> Result<Self> {
        Ok(LayerNormSlots {
            gain: params.filled(&format!("{prefix}.gain"), &[d], 1.0, dtype)?,
            bias: params.filled(&format!("{prefix}.bias"), &[d], 0.0, dtype)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlockParams {
    pub attn: [MhaParams; 3],
    pub norms: [LayerNormSlots; 4],
    pub ff1_weight: usize,
    pub ff1_bias: usize,
    pub ff2_weight: usize,
    pub ff2_bias: usize,
    pub model_dim: usize,
}

impl AttentionBlockParams {
    /// Feed-forward hidden width is `ff_mult * model_dim`.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        model_dim: usize,
        head_count: usize,
        ff_mult: usize,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = [
            MhaParams::init(params, &format!("{prefix}.cross"), model_dim, head_count, dtype, rng)?,
            MhaParams::init(params, &format!("{prefix}.self1"), model_dim, head_count, dtype, rng)?,
            MhaParams::init(params, &format!("{prefix}.self2"), model_dim, head_count, dtype, rng)?,
        ];
        let norms = [
            LayerNormSlots::init(params, &format!("{prefix}.ln0"), model_dim, dtype)?,
            LayerNormSlots::init(params, &format!("{prefix}.ln1"), model_dim, dtype)?,
            LayerNormSlots::init(params, &format!("{prefix}.ln2"), model_dim, dtype)?,
            LayerNormSlots::init(params, &format!("{prefix}.ln3"), model_dim, dtype)?,
        ];
        let hidden = ff_mult.max(1) * model_dim;
        Ok(AttentionBlockParams {
            attn,
            norms,
            ff1_weight: params.weight(&format!("{prefix}.ff1.w"), model_dim, hidden, dtype, rng)?,
            ff1_bias: params.filled(&format!("{prefix}.ff1.b"), &[hidden], 0.0, dtype)?,
            ff2_weight: params.weight(&format!("{prefix}.ff2.w"), hidden, model_dim, dtype, rng)?,
            ff2_bias: params.filled(&format!("{prefix}.ff2.b"), &[model_dim], 0.0, dtype)?,
            model_dim,
        })
    }
}

/// Run-time switches for an attention block.
#[derive(Debug, Clone, Copy)]
pub struct BlockMode {
    pub train: bool,
    /// Residual dropout applied to each sublayer output in training.
    pub dropout: f64,
}

impl BlockMode {
    pub const EVAL: BlockMode = BlockMode { train: false, dropout: 0.0 };
}

fn residual_norm<R: Rng + ?Sized>(
    tape: &Tape,
    x: Var,
    sub: Var,
    ln: LayerNormSlots,
    bound: &Bound,
    mode: BlockMode,
    rng: &mut R,
) -> Result<Var> {
    let sub = tape.dropout(sub, mode.dropout, mode.train, rng)?;
    let sum = tape.add(x, sub)?;
    tape.layer_norm(sum, bound.var(ln.gain), bound.var(ln.bias), LN_EPS)
}

/// `Attention-Block(query, key)`: output has the query's length and width.
pub fn attention_block<R: Rng + ?Sized>(
    tape: &Tape,
    query_seq: Var,
    key_seq: Var,
    p: &AttentionBlockParams,
    bound: &Bound,
    mode: BlockMode,
    rng: &mut R,
) -> Result<Var> {
    let cross = multi_head_attention(tape, query_seq, key_seq, key_seq, &p.attn[0], bound)?;
    let mut x = residual_norm(tape, query_seq, cross, p.norms[0], bound, mode, rng)?;
    for (attn, ln) in p.attn[1..].iter().zip(&p.norms[1..3]) {
        let s = multi_head_attention(tape, x, x, x, attn, bound)?;
        x = residual_norm(tape, x, s, *ln, bound, mode, rng)?;
    }
    let h = tape.add_bias(tape.matmul(x, bound.var(p.ff1_weight))?, bound.var(p.ff1_bias))?;
    let h = tape.relu(h)?;
    let f = tape.add_bias(tape.matmul(h, bound.var(p.ff2_weight))?, bound.var(p.ff2_bias))?;
    residual_norm(tape, x, f, p.norms[3], bound, mode, rng)
}
