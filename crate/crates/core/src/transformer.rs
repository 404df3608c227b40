//! Scaled dot-product attention, multi-head attention, post-norm
//! Transformer layers, and embedding tables.
//!
//! All activations are batched as `[batch, tokens, dim]`.

use crate::error::{Error, Result};
use crate::nn::{Graph, Init, LayerNormParams, Linear, ParamId};
use crate::tape::{Mask, Tape, Var};

/// Token-type ids shared by every embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum TokenType {
    Audio = 0,
    Video = 1,
    Text = 2,
    Global = 3,
}

pub const NUM_TOKEN_TYPES: usize = 4;

pub fn causal_mask(n: usize) -> Mask {
    Mask::causal(n)
}

/// `Softmax(Q Kᵀ / sqrt(d)) V` over `[B, N_q, d]`, `[B, N_k, d]`, `[B, N_k, d]`.
///
/// Returns the output and the attention weights `[B, N_q, N_k]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[2] != sk[2] || sq[0] != sk[0] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    if sv.len() != 3 || sv[1] != sk[1] || sv[0] != sk[0] {
        return Err(Error::shape("attention", &sk, &sv));
    }
    let d = sq[2];
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let probs = match mask {
        Some(m) => tape.masked_softmax(scores, m)?,
        None => tape.softmax(scores, 2)?,
    };
    let out = tape.bmm(probs, v, false)?;
    Ok((out, probs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MhaParams {
    pub fn init(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(MhaParams {
            query: init.linear(&format!("{name}.query"), dim, dim),
            key: init.linear(&format!("{name}.key"), dim, dim),
            value: init.linear(&format!("{name}.value"), dim, dim),
            output: init.linear(&format!("{name}.output"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Output of an attention block with its head-resolved weights `[B*h, N_q, N_k]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub probs: Var,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, dim) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, n, heads, dim / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, n, dim / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, hd) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, n, hd])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, n, heads * hd])
}

/// Multi-head attention with queries from `x [B, N_q, D]` and keys/values from `y [B, N_k, D]`.
pub fn mha(g: &mut Graph, x: Var, y: Var, params: &MhaParams, mask: Option<&Mask>) -> Result<Attended> {
    let sx = g.tape.shape(x).to_vec();
    let sy = g.tape.shape(y).to_vec();
    if sx.len() != 3 || sy.len() != 3 || sx[0] != sy[0] || sx[2] != params.dim || sy[2] != params.dim {
        return Err(Error::shape("mha", &sx, &sy));
    }
    let batch = sx[0];
    let q = params.query.forward(g, x)?;
    let k = params.key.forward(g, y)?;
    let v = params.value.forward(g, y)?;
    let h = params.heads;
    let q = split_heads(&mut g.tape, q, h)?;
    let k = split_heads(&mut g.tape, k, h)?;
    let v = split_heads(&mut g.tape, v, h)?;
    let (ctx, probs) = attention(&mut g.tape, q, k, v, mask)?;
    let ctx = merge_heads(&mut g.tape, ctx, batch, h)?;
    let out = params.output.forward(g, ctx)?;
    Ok(Attended { out, probs })
}

/// Two-layer GELU block `D -> hidden -> D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: init.linear(&format!("{name}.up"), dim, hidden),
            down: init.linear(&format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.down.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerLayerParams {
    pub attn: MhaParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
}

impl TransformerLayerParams {
    pub fn init(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(TransformerLayerParams {
            attn: MhaParams::init(init, &format!("{name}.attn"), dim, heads)?,
            norm1: init.layer_norm(&format!("{name}.norm1"), dim),
            ffn: FeedForward::init(init, &format!("{name}.ffn"), dim, ffn_hidden),
            norm2: init.layer_norm(&format!("{name}.norm2"), dim),
        })
    }
}

/// Post-norm layer: `X1 = LN(X + MHA(X, Y, Y))`, `out = LN(X1 + FFB(X1))`.
pub fn transformer_layer(
    g: &mut Graph,
    x: Var,
    y: Var,
    params: &TransformerLayerParams,
    mask: Option<&Mask>,
) -> Result<Attended> {
    let a = mha(g, x, y, &params.attn, mask)?;
    let x1 = g.tape.add(x, a.out)?;
    let x1 = params.norm1.forward(g, x1)?;
    let f = params.ffn.forward(g, x1)?;
    let out = g.tape.add(x1, f)?;
    let out = params.norm2.forward(g, out)?;
    Ok(Attended { out, probs: a.probs })
}

/// Decoder block: causal self-attention, cross-attention over a memory, FFB; all post-norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub norm1: LayerNormParams,
    pub cross_attn: MhaParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
    pub norm3: LayerNormParams,
}

impl DecoderLayerParams {
    pub fn init(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: MhaParams::init(init, &format!("{name}.self_attn"), dim, heads)?,
            norm1: init.layer_norm(&format!("{name}.norm1"), dim),
            cross_attn: MhaParams::init(init, &format!("{name}.cross_attn"), dim, heads)?,
            norm2: init.layer_norm(&format!("{name}.norm2"), dim),
            ffn: FeedForward::init(init, &format!("{name}.ffn"), dim, ffn_hidden),
            norm3: init.layer_norm(&format!("{name}.norm3"), dim),
        })
    }
}

pub fn decoder_layer(g: &mut Graph, x: Var, memory: Var, params: &DecoderLayerParams, mask: &Mask) -> Result<Var> {
    let a = mha(g, x, x, &params.self_attn, Some(mask))?;
    let x1 = g.tape.add(x, a.out)?;
    let x1 = params.norm1.forward(g, x1)?;
    let c = mha(g, x1, memory, &params.cross_attn, None)?;
    let x2 = g.tape.add(x1, c.out)?;
    let x2 = params.norm2.forward(g, x2)?;
    let f = params.ffn.forward(g, x2)?;
    let out = g.tape.add(x2, f)?;
    params.norm3.forward(g, out)
}

/// Token, learned absolute position, and token-type tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub types: ParamId,
}

impl EmbeddingTables {
    pub fn init(init: &mut Init, name: &str, vocab: usize, max_len: usize, dim: usize, types: ParamId) -> Self {
        EmbeddingTables {
            tokens: init.normal(&format!("{name}.tokens"), &[vocab, dim]),
            positions: init.normal(&format!("{name}.positions"), &[max_len, dim]),
            types,
        }
    }
}

/// Sum of token, position, and type lookups for a `[batch, len]` id grid.
///
/// `tokens` is row-major `batch * len`; position of column `j` is `j`.
pub fn embed(g: &mut Graph, tables: &EmbeddingTables, tokens: &[usize], len: usize, type_id: TokenType) -> Result<Var> {
    if len == 0 || !tokens.len().is_multiple_of(len) {
        return Err(Error::InvalidShape(format!("{} token ids do not form rows of {len}", tokens.len())));
    }
    let batch = tokens.len() / len;
    let positions: Vec<usize> = (0..tokens.len()).map(|i| i % len).collect();
    let types = vec![type_id as usize; tokens.len()];
    let (tt, pt, yt) = (g.param(tables.tokens), g.param(tables.positions), g.param(tables.types));
    let tok = g.tape.gather(tt, tokens)?;
    let pos = g.tape.gather(pt, &positions)?;
    let typ = g.tape.gather(yt, &types)?;
    let sum = g.tape.add(tok, pos)?;
    let sum = g.tape.add(sum, typ)?;
    let dim = g.tape.shape(sum)[1];
    g.tape.reshape(sum, &[batch, len, dim])
}
