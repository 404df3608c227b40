//! Encoder, fusion and caption decoder wired into one model.

use serde::{Deserialize, Serialize};

use crate::data::{CaptionBatch, Vocab, BOS1, BOS2, EOS, PAD};
use crate::error::{Error, Result};
use crate::fusion::{cross_encode_traced, layer_attention_matrix, zero_mask, FusionConfig, FusionKind, FusionParams, LayerProbs};
use crate::nn::{Graph, Init, Linear, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::transformer::{causal_mask, decoder_layer, embed, DecoderLayerParams, EmbeddingTables, TokenType, NUM_TOKEN_TYPES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fusion: FusionKind,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub n_audio: usize,
    pub n_video: usize,
    /// Longest decoder sequence, EOS included.
    pub max_caption_len: usize,
    pub vocab: Vocab,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            ffn_hidden: 256,
            fusion: FusionKind::LocalGlobalMerged,
            fusion_layers: 2,
            decoder_layers: 2,
            n_audio: 16,
            n_video: 16,
            max_caption_len: 9,
            vocab: Vocab { caption: 64, audio: 128, video: 128 },
        }
    }
}

impl ModelConfig {
    /// Full-size dimensions: 768-wide, 12 heads, 3 fusion and 3 decoder
    /// layers, 64 audio and 392 video tokens. Not exercised by the tests.
    pub fn full_scale(vocab: Vocab, max_caption_len: usize) -> Self {
        ModelConfig {
            dim: 768,
            heads: 12,
            ffn_hidden: 3072,
            fusion: FusionKind::LocalGlobalMerged,
            fusion_layers: 3,
            decoder_layers: 3,
            n_audio: 64,
            n_video: 392,
            max_caption_len,
            vocab,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            kind: self.fusion,
            layers: self.fusion_layers,
            heads: self.heads,
            dim: self.dim,
            ffn_hidden: self.ffn_hidden,
            n_audio: self.n_audio,
            n_video: self.n_video,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion_config().validate()?;
        if self.decoder_layers == 0 || self.max_caption_len == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidArgument(
                "decoder_layers, max_caption_len and ffn_hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which modalities reach the fusion encoder; the others are zero-masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Av,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Video,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "av" => Ok(Modality::Av),
            "a" | "audio" => Ok(Modality::Audio),
            "v" | "video" => Ok(Modality::Video),
            _ => Err(Error::InvalidArgument(format!("unknown modality `{s}` (expected av, a, v)"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Av => "av",
            Modality::Audio => "a",
            Modality::Video => "v",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    audio: EmbeddingTables,
    video: EmbeddingTables,
    caption: EmbeddingTables,
    fusion: FusionParams,
    decoder: Vec<DecoderLayerParams>,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerModel {
    config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl CaptionerModel {
    /// Builds and initializes every parameter in a fixed order from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let (d, h, f) = (config.dim, config.heads, config.ffn_hidden);
        let types = init.normal("types", &[NUM_TOKEN_TYPES, d]);
        let audio = EmbeddingTables::init(&mut init, "audio", config.vocab.audio, config.n_audio, d, types);
        let video = EmbeddingTables::init(&mut init, "video", config.vocab.video, config.n_video, d, types);
        let caption = EmbeddingTables::init(&mut init, "caption", config.vocab.output_size(), config.max_caption_len, d, types);
        let fusion = FusionParams::init(&mut init, "fusion", config.fusion_config(), types)?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayerParams::init(&mut init, &format!("decoder.layer{i}"), d, h, f))
            .collect::<Result<Vec<_>>>()?;
        let head = init.linear("head", d, config.vocab.output_size());
        let layout = Layout { audio, video, caption, fusion, decoder, head };
        Ok(CaptionerModel { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fusion_params(&self) -> &FusionParams {
        &self.layout.fusion
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn zero_output_head(&mut self) {
        for id in [self.layout.head.weight, self.layout.head.bias] {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn check_batch(&self, batch: &CaptionBatch) -> Result<()> {
        let c = &self.config;
        if batch.n_audio != c.n_audio || batch.n_video != c.n_video {
            return Err(Error::Data(format!(
                "batch has {}+{} input tokens but the model expects {}+{}",
                batch.n_audio, batch.n_video, c.n_audio, c.n_video
            )));
        }
        if batch.caption_len > c.max_caption_len {
            return Err(Error::Data(format!(
                "captions of {} tokens exceed the model limit of {}",
                batch.caption_len, c.max_caption_len
            )));
        }
        Ok(())
    }

    /// Per-modality token embeddings `[B, N_a, D]` and `[B, N_v, D]`.
    pub fn encode_inputs(&self, g: &mut Graph, batch: &CaptionBatch) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let vocab = &self.config.vocab;
        let local = |ids: &[usize], offset: usize, size: usize, what: &'static str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|&t| match t.checked_sub(offset) {
                    Some(x) if x < size => Ok(x),
                    _ => Err(Error::Index { what, index: t, size: offset + size }),
                })
                .collect()
        };
        let a = local(&batch.audio, vocab.audio_offset(), vocab.audio, "audio alphabet")?;
        let v = local(&batch.video, vocab.video_offset(), vocab.video, "video alphabet")?;
        let phi_a = embed(g, &self.layout.audio, &a, batch.n_audio, TokenType::Audio)?;
        let phi_v = if batch.n_video == 0 {
            g.tape.constant(Tensor::zeros(&[batch.size, 0, self.config.dim]))
        } else {
            embed(g, &self.layout.video, &v, batch.n_video, TokenType::Video)?
        };
        Ok((phi_a, phi_v))
    }

    /// Fused memory for the requested modality pathway.
    pub fn fuse(&self, g: &mut Graph, phi_a: Var, phi_v: Var, modality: Modality) -> Result<(Var, Vec<LayerProbs>)> {
        let (a, v) = match modality {
            Modality::Av => (phi_a, phi_v),
            Modality::Audio => (phi_a, zero_mask(&mut g.tape, phi_v)),
            Modality::Video => (zero_mask(&mut g.tape, phi_a), phi_v),
        };
        cross_encode_traced(g, a, v, &self.layout.fusion)
    }

    /// Next-token logits `[B * T, V]` for decoder inputs `[B, T]`.
    pub fn decoder_logits(&self, g: &mut Graph, memory: Var, inputs: &[usize], len: usize) -> Result<Var> {
        let v = self.config.vocab.output_size();
        if let Some(&bad) = inputs.iter().find(|&&t| t >= v) {
            return Err(Error::Index { what: "caption vocabulary", index: bad, size: v });
        }
        let mut x = embed(g, &self.layout.caption, inputs, len, TokenType::Text)?;
        let mask = causal_mask(len);
        for layer in &self.layout.decoder {
            x = decoder_layer(g, x, memory, layer, &mask)?;
        }
        let rows = inputs.len();
        let x = g.tape.reshape(x, &[rows, self.config.dim])?;
        self.layout.head.forward(g, x)
    }

    /// Teacher-forced cross-entropy of `targets [B, T]` with inputs `[bos, targets[..T-1]]`.
    pub fn decoder_loss(&self, g: &mut Graph, memory: Var, targets: &[usize], len: usize, bos: usize) -> Result<Var> {
        if bos != BOS1 && bos != BOS2 {
            return Err(Error::InvalidArgument(format!("{bos} is not a start token")));
        }
        if len == 0 || targets.is_empty() || !targets.len().is_multiple_of(len) {
            return Err(Error::EmptyLoss);
        }
        let inputs: Vec<usize> = targets
            .chunks(len)
            .flat_map(|row| std::iter::once(bos).chain(row[..len - 1].iter().copied()))
            .collect();
        let logits = self.decoder_logits(g, memory, &inputs, len)?;
        g.tape.cross_entropy(logits, targets, PAD)
    }

    /// Caption loss (BOS1) through one modality pathway.
    pub fn caption_loss(&self, g: &mut Graph, batch: &CaptionBatch, modality: Modality) -> Result<Var> {
        let (phi_a, phi_v) = self.encode_inputs(g, batch)?;
        let (memory, _) = self.fuse(g, phi_a, phi_v, modality)?;
        self.decoder_loss(g, memory, &batch.caption, batch.caption_len, BOS1)
    }

    /// Caption losses for several pathways sharing one input embedding,
    /// plus the fused memory of the first pathway.
    pub fn pathway_losses(
        &self,
        g: &mut Graph,
        phi_a: Var,
        phi_v: Var,
        batch: &CaptionBatch,
        pathways: &[Modality],
    ) -> Result<(Vec<Var>, Var)> {
        let mut first = None;
        let mut losses = Vec::with_capacity(pathways.len());
        for &m in pathways {
            let (memory, _) = self.fuse(g, phi_a, phi_v, m)?;
            first.get_or_insert(memory);
            losses.push(self.decoder_loss(g, memory, &batch.caption, batch.caption_len, BOS1)?);
        }
        let first = first.ok_or_else(|| Error::InvalidArgument("no pathways requested".into()))?;
        Ok((losses, first))
    }

    /// Fused memory for a single-sample batch as a plain tensor.
    pub fn memory(&self, batch: &CaptionBatch, modality: Modality) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false);
        let (phi_a, phi_v) = self.encode_inputs(&mut g, batch)?;
        let (memory, _) = self.fuse(&mut g, phi_a, phi_v, modality)?;
        Ok(g.tape.value(memory).clone())
    }

    /// Head-averaged token attention per fusion layer for batch row `b`.
    pub fn attention_maps(&self, batch: &CaptionBatch, modality: Modality, b: usize) -> Result<Vec<Tensor>> {
        if b >= batch.size {
            return Err(Error::Index { what: "batch", index: b, size: batch.size });
        }
        let mut g = Graph::new(&self.store, false);
        let (phi_a, phi_v) = self.encode_inputs(&mut g, batch)?;
        let (_, trace) = self.fuse(&mut g, phi_a, phi_v, modality)?;
        let cfg = self.config.fusion_config();
        Ok(trace.iter().map(|p| layer_attention_matrix(&g.tape, p, &cfg, b)).collect())
    }

    /// Log-softmax of the next token after each prefix (all prefixes equal length),
    /// decoding from `BOS1` against one sample's memory `[1, N, D]`.
    pub fn next_log_probs(&self, memory: &Tensor, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = prefixes.first() else { return Ok(Vec::new()) };
        let len = first.len() + 1;
        if prefixes.iter().any(|p| p.len() + 1 != len) {
            return Err(Error::InvalidArgument("prefixes must share a length".into()));
        }
        if len > self.config.max_caption_len {
            return Err(Error::InvalidArgument(format!("prefix longer than {}", self.config.max_caption_len)));
        }
        let k = prefixes.len();
        let per = memory.numel();
        let mut tiled = Vec::with_capacity(per * k);
        for _ in 0..k {
            tiled.extend_from_slice(memory.data());
        }
        let mut shape = memory.shape().to_vec();
        shape[0] = k;
        let mut g = Graph::new(&self.store, false);
        let mem = g.tape.constant(Tensor::new(shape, tiled)?);
        let inputs: Vec<usize> = prefixes
            .iter()
            .flat_map(|p| std::iter::once(BOS1).chain(p.iter().copied()))
            .collect();
        let logits = self.decoder_logits(&mut g, mem, &inputs, len)?;
        let v = self.config.vocab.output_size();
        let data = g.tape.value(logits).data();
        Ok((0..k)
            .map(|i| {
                let row = &data[(i * len + len - 1) * v..(i * len + len) * v];
                log_softmax(row)
            })
            .collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Strips the trailing EOS and anything after it.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(p) => &tokens[..p],
        None => tokens,
    }
}
