//! Pretraining and fine-tuning loops.

use serde::{Deserialize, Serialize};

use crate::captioner::{strip_eos, CaptionerModel, Modality};
use crate::data::{CaptionBatch, Sample, BOS2};
use crate::decode::{beam_search, greedy_decode, ModelScorer};
use crate::error::{Error, Result};
use crate::mbp::{pretrain_loss, LossTriple, MbpState, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::nn::Graph;
use crate::optim::{adam_step, AdamState, LinearSchedule};
use crate::rng::Rng;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub mbp: bool,
    pub pnc: bool,
    pub alpha: f64,
    pub beta: f64,
    /// With MBP off, the mono-modal losses are still measured (forward only)
    /// every this many steps for logging; 0 disables.
    pub mono_log_every: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            mode: Mode::Pretrain,
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            warmup_frac: 0.1,
            seed: 0,
            mbp: true,
            pnc: true,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            mono_log_every: 1,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            mode: Mode::Finetune,
            steps: 500,
            lr: 1e-5,
            mbp: false,
            pnc: false,
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Finetune && (self.mbp || self.pnc) {
            return Err(Error::InvalidArgument("fine-tuning runs without MBP and without PNC".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument("lr must be non-negative and warmup_frac in [0, 1]".into()));
        }
        MbpState::new(self.alpha, self.beta)?;
        Ok(())
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule { base_lr: self.lr, total_steps: self.steps, warmup_frac: self.warmup_frac }
    }
}

/// One metrics row; absent values are written as empty CSV cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_av: f64,
    pub loss_a: Option<f64>,
    pub loss_v: Option<f64>,
    pub g_a: Option<f64>,
    pub g_v: Option<f64>,
    pub w_a: Option<f64>,
    pub w_v: Option<f64>,
    pub lr: f64,
    pub pnc_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_av,loss_a,loss_v,g_a,g_v,w_a,w_v,lr,pnc_loss";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{},{},{},{},{},{},{:.17e},{}",
            self.step,
            self.loss_av,
            opt(self.loss_a),
            opt(self.loss_v),
            opt(self.g_a),
            opt(self.g_v),
            opt(self.w_a),
            opt(self.w_v),
            self.lr,
            opt(self.pnc_loss)
        )
    }
}

/// Epoch-wise shuffled minibatches, deterministic per seed.
pub struct BatchSampler {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Data("cannot sample batches from an empty dataset".into()));
        }
        let mut s = BatchSampler { rng, order: (0..n).collect(), cursor: n, batch_size };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub struct Trainer {
    pub model: CaptionerModel,
    pub config: TrainConfig,
    pub mbp: MbpState,
    adam: AdamState,
    sampler: BatchSampler,
    step: usize,
}

impl Trainer {
    pub fn new(model: CaptionerModel, config: TrainConfig, train_size: usize) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.store.tensors(), config.lr);
        let sampler = BatchSampler::new(train_size, config.batch_size, Rng::with_stream(config.seed, 1))?;
        Ok(Trainer {
            mbp: MbpState::new(config.alpha, config.beta)?,
            model,
            config,
            adam,
            sampler,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn next_batch(&mut self, data: &[Sample]) -> Result<CaptionBatch> {
        let idx = self.sampler.next_indices();
        let rows: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        CaptionBatch::from_samples(&rows)
    }

    /// Samples a batch from `data` and takes one optimizer step.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepMetrics> {
        let batch = self.next_batch(data)?;
        match self.config.mode {
            Mode::Pretrain => self.pretrain_step(&batch),
            Mode::Finetune => self.finetune_step(&batch),
        }
    }

    pub fn pretrain_step(&mut self, batch: &CaptionBatch) -> Result<StepMetrics> {
        if self.config.mode != Mode::Pretrain {
            return Err(Error::InvalidArgument("pretrain_step called in fine-tuning mode".into()));
        }
        self.step += 1;
        let lr = self.config.schedule().lr(self.step);
        let cfg = self.config;
        let model = &self.model;
        let mut g = Graph::new(&model.store, true);
        let (phi_a, phi_v) = model.encode_inputs(&mut g, batch)?;

        let want_mono = cfg.mbp || (cfg.mono_log_every > 0 && (self.step - 1).is_multiple_of(cfg.mono_log_every));
        let pathways: &[Modality] = if want_mono {
            &[Modality::Av, Modality::Audio, Modality::Video]
        } else {
            &[Modality::Av]
        };
        let (losses, av_memory) = model.pathway_losses(&mut g, phi_a, phi_v, batch, pathways)?;
        let l = losses[0];
        let mono = want_mono.then(|| (losses[1], losses[2]));
        let triple = mono.map(|(a, v)| LossTriple {
            l: g.value(l).item(),
            l_a: g.value(a).item(),
            l_v: g.value(v).item(),
        });

        let mut metrics = StepMetrics {
            step: self.step,
            loss_av: g.value(l).item(),
            loss_a: triple.map(|t| t.l_a),
            loss_v: triple.map(|t| t.l_v),
            g_a: None,
            g_v: None,
            w_a: None,
            w_v: None,
            lr,
            pnc_loss: None,
        };

        let mut total = l;
        if cfg.mbp {
            let (l_a, l_v) = mono.expect("MBP always measures mono-modal losses");
            let (gaps, _) = self.mbp.observe(&triple.expect("set with mono"))?;
            total = pretrain_loss(&mut g.tape, l, l_a, l_v, &self.mbp)?;
            metrics.g_a = Some(gaps.g_a);
            metrics.g_v = Some(gaps.g_v);
            metrics.w_a = Some(self.mbp.w_a);
            metrics.w_v = Some(self.mbp.w_v);
        }
        if cfg.pnc {
            let pnc = model.decoder_loss(&mut g, av_memory, &batch.next_caption, batch.caption_len, BOS2)?;
            metrics.pnc_loss = Some(g.value(pnc).item());
            total = g.tape.add(total, pnc)?;
        }
        let grads = backprop(g, total)?;
        self.update(&grads, lr)?;
        Ok(metrics)
    }

    pub fn finetune_step(&mut self, batch: &CaptionBatch) -> Result<StepMetrics> {
        if self.config.mode != Mode::Finetune {
            return Err(Error::InvalidArgument("finetune_step called in pretraining mode".into()));
        }
        self.step += 1;
        let lr = self.config.schedule().lr(self.step);
        let mut g = Graph::new(&self.model.store, true);
        let l = self.model.caption_loss(&mut g, batch, Modality::Av)?;
        let metrics = StepMetrics {
            step: self.step,
            loss_av: g.value(l).item(),
            loss_a: None,
            loss_v: None,
            g_a: None,
            g_v: None,
            w_a: None,
            w_v: None,
            lr,
            pnc_loss: None,
        };
        let grads = backprop(g, l)?;
        self.update(&grads, lr)?;
        Ok(metrics)
    }

    fn update(&mut self, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        self.adam.lr = lr;
        adam_step(self.model.store.tensors_mut(), grads, &mut self.adam)
    }
}

fn backprop(mut g: Graph, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
    g.tape.backward(loss)?;
    Ok(g.param_grads())
}

/// Mean caption losses over `data` for the three pathways, forward only.
pub fn evaluate_losses(model: &CaptionerModel, data: &[Sample], batch_size: usize) -> Result<LossTriple> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut sums = [0.0; 3];
    let mut tokens = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let rows: Vec<&Sample> = chunk.iter().collect();
        let batch = CaptionBatch::from_samples(&rows)?;
        let count = batch.caption.iter().filter(|&&t| t != crate::data::PAD).count();
        let mut g = Graph::new(&model.store, false);
        let (phi_a, phi_v) = model.encode_inputs(&mut g, &batch)?;
        let all = [Modality::Av, Modality::Audio, Modality::Video];
        let (losses, _) = model.pathway_losses(&mut g, phi_a, phi_v, &batch, &all)?;
        for (k, l) in losses.into_iter().enumerate() {
            sums[k] += g.value(l).item() * count as f64;
        }
        tokens += count;
    }
    let n = tokens as f64;
    Ok(LossTriple { l: sums[0] / n, l_a: sums[1] / n, l_v: sums[2] / n })
}

/// Decoded caption (EOS stripped) for every sample.
pub fn decode_all(model: &CaptionerModel, data: &[Sample], modality: Modality, beam: usize) -> Result<Vec<Vec<usize>>> {
    let max_len = model.config().max_caption_len;
    data.iter()
        .map(|s| {
            let batch = CaptionBatch::from_samples(&[s])?;
            let memory = model.memory(&batch, modality)?;
            let mut scorer = ModelScorer { model, memory };
            let h = if beam <= 1 {
                greedy_decode(&mut scorer, max_len)?
            } else {
                beam_search(&mut scorer, beam, max_len)?
            };
            Ok(strip_eos(&h.tokens).to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::ModelConfig;
    use crate::data::{generate, TaskSpec};
    use crate::fusion::FusionKind;

    fn tiny() -> (TaskSpec, ModelConfig) {
        let spec = TaskSpec { caption_vocab: 8, audio_alphabet: 12, video_alphabet: 12, caption_len: 3, n_audio: 3, n_video: 3, ..TaskSpec::default() };
        let cfg = ModelConfig {
            dim: 16,
            heads: 2,
            ffn_hidden: 32,
            fusion: FusionKind::Merged,
            fusion_layers: 1,
            decoder_layers: 1,
            n_audio: 3,
            n_video: 3,
            max_caption_len: 4,
            vocab: spec.vocab(),
        };
        (spec, cfg)
    }

    #[test]
    fn finetune_rejects_mbp() {
        let c = TrainConfig { mbp: true, ..TrainConfig::finetune() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, Rng::new(0)).unwrap();
        let mut a = s.next_indices();
        a.extend(s.next_indices());
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_rows_have_ten_columns() {
        let (spec, cfg) = tiny();
        let data = generate(&spec, 16).unwrap();
        let model = CaptionerModel::new(cfg, 0).unwrap();
        let tc = TrainConfig { steps: 2, batch_size: 4, ..TrainConfig::pretrain() };
        let mut t = Trainer::new(model, tc, data.len()).unwrap();
        let m = t.train_step(&data).unwrap();
        assert_eq!(m.csv_row().split(',').count(), METRICS_HEADER.split(',').count());
        assert!(m.w_a.is_some() && m.pnc_loss.is_some());
    }

    #[test]
    fn loss_drops_on_learnable_task() {
        let (spec, cfg) = tiny();
        let data = generate(&spec, 64).unwrap();
        let model = CaptionerModel::new(cfg, 0).unwrap();
        let tc = TrainConfig { steps: 150, batch_size: 16, lr: 3e-3, mbp: false, pnc: false, ..TrainConfig::pretrain() };
        let mut t = Trainer::new(model, tc, data.len()).unwrap();
        let before = evaluate_losses(&t.model, &data, 32).unwrap().l;
        for _ in 0..150 {
            t.train_step(&data).unwrap();
        }
        let after = evaluate_losses(&t.model, &data, 32).unwrap().l;
        assert!(after < 0.7 * before, "{before} -> {after}");
    }
}
