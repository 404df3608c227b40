//! Cross-modal fusion encoders producing the joint audio-video embedding.
//!
//! Five layer kinds are supported:
//!
//! * merged: both modalities concatenated into one self-attention stream;
//! * cross: each modality queries the other through its own transformer;
//! * global cross: each modality attends to its own tokens plus the other
//!   modality's single global token, so cross-modal information moves only
//!   through the globals;
//! * local-global merged / cross: the average of a local (merged or cross)
//!   path and a global cross path, with independent parameters.
//!
//! Inputs and outputs are `[batch, tokens, dim]`; global tokens are
//! `[batch, 1, dim]` and never leave the encoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Init, ParamId, INIT_STD};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{transformer_layer, TokenType, TransformerLayerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "merged")]
    Merged,
    #[serde(rename = "cross")]
    Cross,
    #[serde(rename = "global-cross")]
    GlobalCross,
    #[serde(rename = "lg-merged")]
    LocalGlobalMerged,
    #[serde(rename = "lg-cross")]
    LocalGlobalCross,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Merged,
        FusionKind::Cross,
        FusionKind::GlobalCross,
        FusionKind::LocalGlobalMerged,
        FusionKind::LocalGlobalCross,
    ];

    pub fn uses_global_tokens(self) -> bool {
        matches!(
            self,
            FusionKind::GlobalCross | FusionKind::LocalGlobalMerged | FusionKind::LocalGlobalCross
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Merged => "merged",
            FusionKind::Cross => "cross",
            FusionKind::GlobalCross => "global-cross",
            FusionKind::LocalGlobalMerged => "lg-merged",
            FusionKind::LocalGlobalCross => "lg-cross",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "merged" => Ok(FusionKind::Merged),
            "cross" => Ok(FusionKind::Cross),
            "global-cross" => Ok(FusionKind::GlobalCross),
            "lg-merged" | "local-global-merged" => Ok(FusionKind::LocalGlobalMerged),
            "lg-cross" | "local-global-cross" => Ok(FusionKind::LocalGlobalCross),
            _ => Err(Error::InvalidArgument(format!(
                "unknown fusion kind `{s}` (expected merged, cross, global-cross, lg-merged, lg-cross)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub n_audio: usize,
    pub n_video: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidArgument("fusion needs at least one layer".into()));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "fusion dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Local token matrices and (for global kinds) the two global tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionState {
    pub phi_a: Var,
    pub phi_v: Var,
    pub g_a: Option<Var>,
    pub g_v: Option<Var>,
}

impl FusionState {
    fn globals(&self) -> Result<(Var, Var)> {
        match (self.g_a, self.g_v) {
            (Some(a), Some(v)) => Ok((a, v)),
            _ => Err(Error::InvalidArgument("global cross fusion requires global tokens".into())),
        }
    }
}

/// Pair of modality-specific transformers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchParams {
    pub audio: TransformerLayerParams,
    pub video: TransformerLayerParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalParams {
    Merged(TransformerLayerParams),
    Cross(BranchParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionLayerParams {
    pub local: Option<LocalParams>,
    pub global: Option<BranchParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub layers: Vec<FusionLayerParams>,
    /// Learnable first-layer global tokens `[1, D]` for audio and video.
    pub global_tokens: Option<(ParamId, ParamId)>,
    /// Shared token-type table; row [`TokenType::Global`] tags the globals.
    pub types: ParamId,
}

impl FusionParams {
    pub fn init(init: &mut Init, name: &str, config: FusionConfig, types: ParamId) -> Result<Self> {
        config.validate()?;
        let (d, h, f) = (config.dim, config.heads, config.ffn_hidden);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{name}.layer{i}");
            let merged = |init: &mut Init| TransformerLayerParams::init(init, &format!("{p}.merged"), d, h, f);
            let branch = |init: &mut Init, tag: &str| -> Result<BranchParams> {
                Ok(BranchParams {
                    audio: TransformerLayerParams::init(init, &format!("{p}.{tag}.audio"), d, h, f)?,
                    video: TransformerLayerParams::init(init, &format!("{p}.{tag}.video"), d, h, f)?,
                })
            };
            let layer = match config.kind {
                FusionKind::Merged => FusionLayerParams {
                    local: Some(LocalParams::Merged(merged(init)?)),
                    global: None,
                },
                FusionKind::Cross => FusionLayerParams {
                    local: Some(LocalParams::Cross(branch(init, "cross")?)),
                    global: None,
                },
                FusionKind::GlobalCross => FusionLayerParams {
                    local: None,
                    global: Some(branch(init, "global")?),
                },
                FusionKind::LocalGlobalMerged => FusionLayerParams {
                    local: Some(LocalParams::Merged(merged(init)?)),
                    global: Some(branch(init, "global")?),
                },
                FusionKind::LocalGlobalCross => FusionLayerParams {
                    local: Some(LocalParams::Cross(branch(init, "cross")?)),
                    global: Some(branch(init, "global")?),
                },
            };
            layers.push(layer);
        }
        let global_tokens = config.kind.uses_global_tokens().then(|| {
            (
                init.normal(&format!("{name}.global_audio"), &[1, d]),
                init.normal(&format!("{name}.global_video"), &[1, d]),
            )
        });
        Ok(FusionParams {
            config,
            layers,
            global_tokens,
            types,
        })
    }
}

/// Two independent `[1, D]` Gaussian tokens (mean 0, std 0.02) for a seed.
pub fn init_global_tokens(dim: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if dim == 0 {
        return Err(Error::InvalidArgument("global token dim must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let a = Tensor::randn(&[1, dim], INIT_STD, &mut rng);
    let v = Tensor::randn(&[1, dim], INIT_STD, &mut rng);
    Ok((a, v))
}

/// All-zero stand-in for a modality's embeddings. The zero rows stay in
/// the sequence and still take part in attention.
pub fn zero_mask(tape: &mut Tape, phi: Var) -> Var {
    let shape = tape.shape(phi).to_vec();
    tape.constant(Tensor::zeros(&shape))
}

/// Attention weights `[B*h, N_q, N_k]` recorded by one fusion layer.
#[derive(Clone, Debug)]
pub enum LayerProbs {
    Merged(Var),
    Cross { audio: Var, video: Var },
    Global { audio: Var, video: Var },
    LocalGlobal { local: Box<LayerProbs>, global: Box<LayerProbs> },
}

fn tokens(tape: &Tape, v: Var) -> usize {
    tape.shape(v)[1]
}

pub fn merged_layer(g: &mut Graph, state: FusionState, params: &TransformerLayerParams) -> Result<(FusionState, LayerProbs)> {
    let n_a = tokens(&g.tape, state.phi_a);
    let n_v = tokens(&g.tape, state.phi_v);
    let x = g.tape.concat(&[state.phi_a, state.phi_v], 1)?;
    let out = transformer_layer(g, x, x, params, None)?;
    let phi_a = g.tape.slice(out.out, 1, 0, n_a)?;
    let phi_v = g.tape.slice(out.out, 1, n_a, n_v)?;
    Ok((FusionState { phi_a, phi_v, ..state }, LayerProbs::Merged(out.probs)))
}

/// Both branches read the layer-i inputs.
pub fn cross_layer(g: &mut Graph, state: FusionState, params_a: &TransformerLayerParams, params_v: &TransformerLayerParams) -> Result<(FusionState, LayerProbs)> {
    let a = transformer_layer(g, state.phi_a, state.phi_v, params_a, None)?;
    let v = transformer_layer(g, state.phi_v, state.phi_a, params_v, None)?;
    let probs = LayerProbs::Cross { audio: a.probs, video: v.probs };
    Ok((FusionState { phi_a: a.out, phi_v: v.out, ..state }, probs))
}

/// Queries `[phi_m; G_m]` against context `[phi_m; G_other]` for each modality.
pub fn global_cross_layer(g: &mut Graph, state: FusionState, params_a: &TransformerLayerParams, params_v: &TransformerLayerParams) -> Result<(FusionState, LayerProbs)> {
    let (g_a, g_v) = state.globals()?;
    let n_a = tokens(&g.tape, state.phi_a);
    let n_v = tokens(&g.tape, state.phi_v);

    let qa = g.tape.concat(&[state.phi_a, g_a], 1)?;
    let ca = g.tape.concat(&[state.phi_a, g_v], 1)?;
    let qv = g.tape.concat(&[state.phi_v, g_v], 1)?;
    let cv = g.tape.concat(&[state.phi_v, g_a], 1)?;
    let a = transformer_layer(g, qa, ca, params_a, None)?;
    let v = transformer_layer(g, qv, cv, params_v, None)?;

    let next = FusionState {
        phi_a: g.tape.slice(a.out, 1, 0, n_a)?,
        g_a: Some(g.tape.slice(a.out, 1, n_a, 1)?),
        phi_v: g.tape.slice(v.out, 1, 0, n_v)?,
        g_v: Some(g.tape.slice(v.out, 1, n_v, 1)?),
    };
    Ok((next, LayerProbs::Global { audio: a.probs, video: v.probs }))
}

/// Averages the local path and the global cross path; globals advance via the global path.
pub fn local_global_layer(g: &mut Graph, state: FusionState, local: &LocalParams, global: &BranchParams) -> Result<(FusionState, LayerProbs)> {
    let (loc, local_probs) = match local {
        LocalParams::Merged(p) => merged_layer(g, state, p)?,
        LocalParams::Cross(b) => cross_layer(g, state, &b.audio, &b.video)?,
    };
    let (glob, global_probs) = global_cross_layer(g, state, &global.audio, &global.video)?;
    let sum_a = g.tape.add(loc.phi_a, glob.phi_a)?;
    let sum_v = g.tape.add(loc.phi_v, glob.phi_v)?;
    let next = FusionState {
        phi_a: g.tape.scale(sum_a, 0.5)?,
        phi_v: g.tape.scale(sum_v, 0.5)?,
        g_a: glob.g_a,
        g_v: glob.g_v,
    };
    let probs = LayerProbs::LocalGlobal {
        local: Box::new(local_probs),
        global: Box::new(global_probs),
    };
    Ok((next, probs))
}

fn apply_layer(g: &mut Graph, state: FusionState, layer: &FusionLayerParams) -> Result<(FusionState, LayerProbs)> {
    match (&layer.local, &layer.global) {
        (Some(LocalParams::Merged(p)), None) => merged_layer(g, state, p),
        (Some(LocalParams::Cross(b)), None) => cross_layer(g, state, &b.audio, &b.video),
        (None, Some(b)) => global_cross_layer(g, state, &b.audio, &b.video),
        (Some(local), Some(global)) => local_global_layer(g, state, local, global),
        (None, None) => Err(Error::InvalidArgument("empty fusion layer".into())),
    }
}

/// First-layer global tokens, broadcast over the batch and tagged with the global type row.
fn initial_globals(g: &mut Graph, params: &FusionParams, batch: usize) -> Result<(Option<Var>, Option<Var>)> {
    let Some((ga, gv)) = params.global_tokens else {
        return Ok((None, None));
    };
    let dim = params.config.dim;
    let types = g.param(params.types);
    let type_row = g.tape.gather(types, &[TokenType::Global as usize])?;
    let type_row = g.tape.reshape(type_row, &[dim])?;
    let mut expand = |id: ParamId| -> Result<Var> {
        let token = g.param(id);
        let rows = g.tape.gather(token, &vec![0; batch])?;
        let rows = g.tape.add(rows, type_row)?;
        g.tape.reshape(rows, &[batch, 1, dim])
    };
    Ok((Some(expand(ga)?), Some(expand(gv)?)))
}

/// Runs every fusion layer and returns `phi_c = [phi_a; phi_v]` plus per-layer attention.
pub fn cross_encode_traced(g: &mut Graph, phi_a: Var, phi_v: Var, params: &FusionParams) -> Result<(Var, Vec<LayerProbs>)> {
    let cfg = &params.config;
    let (sa, sv) = (g.tape.shape(phi_a).to_vec(), g.tape.shape(phi_v).to_vec());
    if sa.len() != 3 || sv.len() != 3 || sa[0] != sv[0] || sa[2] != cfg.dim || sv[2] != cfg.dim {
        return Err(Error::shape("cross_encode", &sa, &sv));
    }
    if sa[1] != cfg.n_audio || sv[1] != cfg.n_video {
        return Err(Error::InvalidShape(format!(
            "fusion configured for {}+{} tokens, got {}+{}",
            cfg.n_audio, cfg.n_video, sa[1], sv[1]
        )));
    }
    if params.layers.is_empty() {
        return Err(Error::InvalidArgument("fusion needs at least one layer".into()));
    }
    let (g_a, g_v) = initial_globals(g, params, sa[0])?;
    let mut state = FusionState { phi_a, phi_v, g_a, g_v };
    let mut trace = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, probs) = apply_layer(g, state, layer)?;
        state = next;
        trace.push(probs);
    }
    let phi_c = g.tape.concat(&[state.phi_a, state.phi_v], 1)?;
    Ok((phi_c, trace))
}

pub fn cross_encode(g: &mut Graph, phi_a: Var, phi_v: Var, params: &FusionParams) -> Result<Var> {
    cross_encode_traced(g, phi_a, phi_v, params).map(|(phi_c, _)| phi_c)
}

/// Head-averaged weights of batch element `b` from `[B*h, N_q, N_k]`.
fn head_mean(tape: &Tape, probs: Var, heads: usize, b: usize) -> (usize, usize, Vec<f64>) {
    let s = tape.shape(probs);
    let (nq, nk) = (s[1], s[2]);
    let data = tape.value(probs).data();
    let mut out = vec![0.0; nq * nk];
    for h in 0..heads {
        let base = (b * heads + h) * nq * nk;
        for (o, x) in out.iter_mut().zip(&data[base..base + nq * nk]) {
            *o += x / heads as f64;
        }
    }
    (nq, nk, out)
}

/// Token-level attention matrix for one fusion layer, over the token order
/// `[audio locals, video locals, G_a, G_v]` (globals only for global kinds).
///
/// Every row is a probability distribution over source tokens.
pub fn layer_attention_matrix(tape: &Tape, probs: &LayerProbs, config: &FusionConfig, b: usize) -> Tensor {
    let (n_a, n_v) = (config.n_audio, config.n_video);
    let n = n_a + n_v + if config.kind.uses_global_tokens() { 2 } else { 0 };
    let mut m = Tensor::zeros(&[n, n]);
    fill_matrix(tape, probs, config, b, &mut m);
    m
}

fn fill_matrix(tape: &Tape, probs: &LayerProbs, config: &FusionConfig, b: usize, m: &mut Tensor) {
    let (n_a, n_v, h) = (config.n_audio, config.n_video, config.heads);
    let n = m.shape()[0];
    let (ga, gv) = (n_a + n_v, n_a + n_v + 1);
    let data = m.data_mut();
    let place = |p: Var, rows: &dyn Fn(usize) -> usize, cols: &dyn Fn(usize) -> usize, data: &mut [f64]| {
        let (nq, nk, w) = head_mean(tape, p, h, b);
        for i in 0..nq {
            for j in 0..nk {
                data[rows(i) * n + cols(j)] += w[i * nk + j];
            }
        }
    };
    match probs {
        LayerProbs::Merged(p) => place(*p, &|i| i, &|j| j, data),
        LayerProbs::Cross { audio, video } => {
            place(*audio, &|i| i, &|j| n_a + j, data);
            place(*video, &|i| n_a + i, &|j| j, data);
        }
        LayerProbs::Global { audio, video } => {
            let a_idx = |i: usize| if i < n_a { i } else { ga };
            let a_ctx = |j: usize| if j < n_a { j } else { gv };
            let v_idx = |i: usize| if i < n_v { n_a + i } else { gv };
            let v_ctx = |j: usize| if j < n_v { n_a + j } else { ga };
            place(*audio, &a_idx, &a_ctx, data);
            place(*video, &v_idx, &v_ctx, data);
        }
        LayerProbs::LocalGlobal { local, global } => {
            let mut loc = Tensor::zeros(&[n, n]);
            let mut glob = Tensor::zeros(&[n, n]);
            fill_matrix(tape, local, config, b, &mut loc);
            fill_matrix(tape, global, config, b, &mut glob);
            let (loc, glob) = (loc.data(), glob.data());
            for r in 0..n {
                let local_row = r < n_a + n_v;
                for c in 0..n {
                    let ix = r * n + c;
                    data[ix] = if local_row { 0.5 * (loc[ix] + glob[ix]) } else { glob[ix] };
                }
            }
        }
    }
}
