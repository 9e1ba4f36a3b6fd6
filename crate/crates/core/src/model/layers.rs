//! Transformer sublayers on a [`Tape`]: FFN, multi-head attention, and the
//! pre-norm residual wrapper.
//!
//! Parameter bundles come in two flavours. `*Ids` structs name parameters in a
//! [`ParamStore`]; `load` reads them onto a tape (one use site per call) and
//! yields the `*Params` struct of tape variables that the ops consume.

use rand::RngCore;

use crate::autodiff::{AttnLayout, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

impl NormIds {
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> NormParams {
        NormParams {
            gain: tape.param(store, self.gain),
            bias: tape.param(store, self.bias),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// `W1 [d, h]`, `b1 [h]`, `W2 [h, d]`, `b2 [d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnIds {
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> FfnParams {
        FfnParams {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Query/key/value/output projections, each `[d, d]` with a `[d]` bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

impl AttnIds {
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> AttnParams {
        AttnParams {
            wq: tape.param(store, self.wq),
            bq: tape.param(store, self.bq),
            wk: tape.param(store, self.wk),
            bk: tape.param(store, self.bk),
            wv: tape.param(store, self.wv),
            bv: tape.param(store, self.bv),
            wo: tape.param(store, self.wo),
            bo: tape.param(store, self.bo),
            heads: self.heads,
        }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }
}

/// `x W + b` for a row-major activation matrix.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// `ReLU(x W1 + b1) W2 + b2`.
pub fn ffn(tape: &mut Tape, x: Var, p: &FfnParams) -> Result<Var> {
    let width = tape.value(x).cols();
    let w1 = tape.value(p.w1).shape().to_vec();
    let w2 = tape.value(p.w2).shape().to_vec();
    if w1.len() != 2 || w1[0] != width || w2.len() != 2 || w2[0] != w1[1] || w2[1] != width {
        return Err(Error::shape(
            "ffn",
            format!("input width {width} with W1 {w1:?} and W2 {w2:?}"),
        ));
    }
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = tape.relu(h);
    linear(tape, h, p.w2, p.b2)
}

/// Multi-head scaled dot-product attention with output projection.
///
/// `layout` describes batch/length structure and masking; its head count is
/// replaced by `p.heads`. Attention weights are dropped out at `attn_dropout`
/// when a generator is supplied.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    p: &AttnParams,
    layout: &AttnLayout,
    attn_dropout: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let q = linear(tape, q_in, p.wq, p.bq)?;
    let k = linear(tape, kv_in, p.wk, p.bk)?;
    let v = linear(tape, kv_in, p.wv, p.bv)?;
    let ctx = tape.attention(
        q,
        k,
        v,
        layout.clone().with_heads(p.heads),
        attn_dropout,
        rng,
    )?;
    linear(tape, ctx, p.wo, p.bo)
}

/// Pre-norm residual: `x + f(LayerNorm(x))`.
pub fn sublayer_apply<F>(tape: &mut Tape, x: Var, norm: &NormParams, eps: f64, f: F) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let h = tape.layer_norm(x, Some(norm.gain), Some(norm.bias), eps)?;
    let y = f(tape, h)?;
    tape.add(x, y)
}
