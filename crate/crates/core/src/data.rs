//! Synthetic two-modality caption tasks.
//!
//! Every sample draws a caption of `caption_len` words. The audio stream
//! carries each word verbatim at a fixed stride with probability `p_audio`;
//! the video stream carries a seed-derived code of each word with
//! probability `p_video`. All other slots hold noise tokens drawn from the
//! non-code part of the modality's alphabet.
//!
//! Ids share one space: four specials, then caption words, then the audio
//! alphabet, then the video alphabet.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const BOS1: usize = 1;
pub const BOS2: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub caption_vocab: usize,
    pub audio_alphabet: usize,
    pub video_alphabet: usize,
    pub caption_len: usize,
    pub n_audio: usize,
    pub n_video: usize,
    pub p_audio: f64,
    pub p_video: f64,
    /// Next caption is each word shifted by this amount modulo the vocabulary.
    pub shift: usize,
    pub seed: u64,
    /// Seeds the word-to-video-code bijection; shared by related tasks.
    pub code_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            caption_vocab: 64,
            audio_alphabet: 128,
            video_alphabet: 128,
            caption_len: 8,
            n_audio: 16,
            n_video: 16,
            p_audio: 1.0,
            p_video: 0.9,
            shift: 1,
            seed: 0,
            code_seed: 0,
        }
    }
}

impl TaskSpec {
    /// Video-critical variant used for fine-tuning.
    pub fn downstream() -> Self {
        TaskSpec {
            p_audio: 0.2,
            p_video: 1.0,
            seed: 1,
            ..TaskSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.caption_vocab == 0 || self.caption_len == 0 {
            return bad("caption_vocab and caption_len must be positive".into());
        }
        for (name, p) in [("p_audio", self.p_audio), ("p_video", self.p_video)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        for (name, size) in [("audio_alphabet", self.audio_alphabet), ("video_alphabet", self.video_alphabet)] {
            if size <= self.caption_vocab {
                return bad(format!(
                    "{name} = {size} must exceed caption_vocab = {} to leave room for noise tokens",
                    self.caption_vocab
                ));
            }
        }
        for (name, n) in [("n_audio", self.n_audio), ("n_video", self.n_video)] {
            if n < self.caption_len {
                return bad(format!(
                    "{name} = {n} is too short to hold {} embedded caption tokens",
                    self.caption_len
                ));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            caption: self.caption_vocab,
            audio: self.audio_alphabet,
            video: self.video_alphabet,
        }
    }

    fn stride(n: usize, len: usize) -> usize {
        n / len
    }

    /// Stream positions that carry caption word `j` for an `n`-token stream.
    pub fn code_positions(&self, n: usize) -> Vec<usize> {
        let s = Self::stride(n, self.caption_len);
        (0..self.caption_len).map(|j| j * s).collect()
    }

    /// Best achievable mean per-token loss (nats) when a stream carries each
    /// word with probability `p`. EOS is always predictable.
    pub fn floor_loss(&self, p: f64) -> f64 {
        let l = self.caption_len as f64;
        l * (1.0 - p) * (self.caption_vocab as f64).ln() / (l + 1.0)
    }

    pub fn audio_floor(&self) -> f64 {
        self.floor_loss(self.p_audio)
    }

    pub fn video_floor(&self) -> f64 {
        self.floor_loss(self.p_video)
    }

    /// Floor with both streams: a word is unknown only if both miss it.
    pub fn joint_floor(&self) -> f64 {
        self.floor_loss(1.0 - (1.0 - self.p_audio) * (1.0 - self.p_video))
    }

    /// Video alphabet index assigned to each caption word.
    pub fn video_codes(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.video_alphabet).collect();
        Rng::with_stream(self.code_seed, u64::MAX).shuffle(&mut perm);
        perm.truncate(self.caption_vocab);
        perm
    }
}

/// Sizes of the caption vocabulary and the two input alphabets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub caption: usize,
    pub audio: usize,
    pub video: usize,
}

impl Vocab {
    /// Decoder vocabulary: specials plus caption words.
    pub fn output_size(&self) -> usize {
        NUM_SPECIALS + self.caption
    }

    pub fn word_id(&self, word: usize) -> usize {
        NUM_SPECIALS + word
    }

    pub fn audio_offset(&self) -> usize {
        NUM_SPECIALS + self.caption
    }

    pub fn video_offset(&self) -> usize {
        self.audio_offset() + self.audio
    }

    pub fn total(&self) -> usize {
        self.video_offset() + self.video
    }

    pub fn is_word(&self, id: usize) -> bool {
        (NUM_SPECIALS..self.audio_offset()).contains(&id)
    }

    pub fn name(&self, id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS1 => "<bos1>".into(),
            BOS2 => "<bos2>".into(),
            EOS => "<eos>".into(),
            _ if id < self.audio_offset() => format!("w{}", id - NUM_SPECIALS),
            _ if id < self.video_offset() => format!("a{}", id - self.audio_offset()),
            _ => format!("v{}", id - self.video_offset()),
        }
    }

    pub fn sidecar(&self) -> serde_json::Value {
        let names = |start: usize, n: usize| (start..start + n).map(|i| self.name(i)).collect::<Vec<_>>();
        serde_json::json!({
            "specials": {"PAD": PAD, "BOS1": BOS1, "BOS2": BOS2, "EOS": EOS},
            "caption": names(NUM_SPECIALS, self.caption),
            "audio": names(self.audio_offset(), self.audio),
            "video": names(self.video_offset(), self.video),
        })
    }

    /// Inverse of [`Vocab::sidecar`].
    pub fn from_sidecar(v: &serde_json::Value) -> Result<Self> {
        let len = |key: &str| {
            v.get(key)
                .and_then(|x| x.as_array())
                .map(Vec::len)
                .ok_or_else(|| Error::Data(format!("vocab sidecar is missing \"{key}\"")))
        };
        let vocab = Vocab {
            caption: len("caption")?,
            audio: len("audio")?,
            video: len("video")?,
        };
        if vocab.sidecar() != *v {
            return Err(Error::Data("vocab sidecar does not match the standard layout".into()));
        }
        Ok(vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub audio: Vec<usize>,
    pub video: Vec<usize>,
    /// Words followed by EOS.
    pub caption: Vec<usize>,
    pub next_caption: Vec<usize>,
}

/// The sample at `index`, a pure function of `(spec, index)`.
pub fn sample(spec: &TaskSpec, codes: &[usize], index: u64) -> Sample {
    let vocab = spec.vocab();
    let mut rng = Rng::with_stream(spec.seed, index);
    let words: Vec<usize> = (0..spec.caption_len).map(|_| rng.below(spec.caption_vocab)).collect();

    let mut video_is_code = vec![false; spec.video_alphabet];
    for &c in codes {
        video_is_code[c] = true;
    }
    let video_noise: Vec<usize> = (0..spec.video_alphabet).filter(|&i| !video_is_code[i]).collect();
    let audio_noise = spec.audio_alphabet - spec.caption_vocab;

    let mut audio: Vec<usize> = (0..spec.n_audio)
        .map(|_| vocab.audio_offset() + spec.caption_vocab + rng.below(audio_noise))
        .collect();
    for (j, pos) in spec.code_positions(spec.n_audio).into_iter().enumerate() {
        if rng.bernoulli(spec.p_audio) {
            audio[pos] = vocab.audio_offset() + words[j];
        }
    }
    let mut video: Vec<usize> = (0..spec.n_video)
        .map(|_| vocab.video_offset() + video_noise[rng.below(video_noise.len())])
        .collect();
    for (j, pos) in spec.code_positions(spec.n_video).into_iter().enumerate() {
        if rng.bernoulli(spec.p_video) {
            video[pos] = vocab.video_offset() + codes[words[j]];
        }
    }

    let caption = words.iter().map(|&w| vocab.word_id(w)).chain([EOS]).collect();
    let next_caption = words
        .iter()
        .map(|&w| vocab.word_id((w + spec.shift) % spec.caption_vocab))
        .chain([EOS])
        .collect();
    Sample { audio, video, caption, next_caption }
}

pub fn generate(spec: &TaskSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot generate an empty dataset".into()));
    }
    let codes = spec.video_codes();
    Ok((0..n as u64).map(|i| sample(spec, &codes, i)).collect())
}

/// Contiguous train/val/test split. Counts are rounded; test takes the rest.
pub fn split(data: &[Sample], fractions: [f64; 3]) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = data.len();
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    if train == 0 || val == 0 || train + val == n {
        return Err(Error::Data(format!("split of {n} samples by {fractions:?} leaves an empty part")));
    }
    Ok((
        data[..train].to_vec(),
        data[train..train + val].to_vec(),
        data[train + val..].to_vec(),
    ))
}

/// Checks that every id lies in its modality's range and streams have the expected lengths.
pub fn validate_samples(data: &[Sample], spec: &TaskSpec) -> Result<()> {
    let vocab = spec.vocab();
    let (ao, vo) = (vocab.audio_offset(), vocab.video_offset());
    for (i, s) in data.iter().enumerate() {
        let fail = |m: String| Err(Error::Data(format!("sample {i}: {m}")));
        if s.audio.len() != spec.n_audio || s.video.len() != spec.n_video {
            return fail(format!("expected {}+{} input tokens", spec.n_audio, spec.n_video));
        }
        if s.caption.len() != spec.caption_len + 1 || s.next_caption.len() != spec.caption_len + 1 {
            return fail(format!("captions must hold {} tokens", spec.caption_len + 1));
        }
        if let Some(t) = s.audio.iter().find(|&&t| !(ao..vo).contains(&t)) {
            return fail(format!("audio id {t} outside [{ao}, {vo})"));
        }
        if let Some(t) = s.video.iter().find(|&&t| !(vo..vocab.total()).contains(&t)) {
            return fail(format!("video id {t} outside [{vo}, {})", vocab.total()));
        }
        for cap in [&s.caption, &s.next_caption] {
            if let Some(t) = cap.iter().find(|&&t| t >= ao) {
                return fail(format!("caption id {t} outside the caption vocabulary"));
            }
            match cap.iter().position(|&t| t == EOS) {
                Some(p) if cap[p + 1..].iter().all(|&t| t == PAD) => {}
                _ => return fail("caption must end with EOS before padding".into()),
            }
        }
    }
    Ok(())
}

pub fn to_jsonl(data: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in data {
        serde_json::to_writer(&mut out, s).expect("samples always serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl(data: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_jsonl(data))?;
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Hex SHA-256 of the JSONL encoding.
pub fn checksum(data: &[Sample]) -> String {
    hex::encode(Sha256::digest(to_jsonl(data)))
}

/// Model-ready minibatch with row-major id grids.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBatch {
    pub size: usize,
    pub n_audio: usize,
    pub n_video: usize,
    pub caption_len: usize,
    pub audio: Vec<usize>,
    pub video: Vec<usize>,
    pub caption: Vec<usize>,
    pub next_caption: Vec<usize>,
}

impl CaptionBatch {
    /// Captions shorter than the longest one are PAD-filled.
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (n_a, n_v) = (first.audio.len(), first.video.len());
        let len = samples
            .iter()
            .map(|s| s.caption.len().max(s.next_caption.len()))
            .max()
            .unwrap_or(0);
        let mut b = CaptionBatch {
            size: samples.len(),
            n_audio: n_a,
            n_video: n_v,
            caption_len: len,
            audio: Vec::with_capacity(samples.len() * n_a),
            video: Vec::with_capacity(samples.len() * n_v),
            caption: Vec::with_capacity(samples.len() * len),
            next_caption: Vec::with_capacity(samples.len() * len),
        };
        for s in samples {
            if s.audio.len() != n_a || s.video.len() != n_v {
                return Err(Error::Data("batch mixes stream lengths".into()));
            }
            b.audio.extend_from_slice(&s.audio);
            b.video.extend_from_slice(&s.video);
            for (dst, src) in [(&mut b.caption, &s.caption), (&mut b.next_caption, &s.next_caption)] {
                dst.extend_from_slice(src);
                dst.extend(std::iter::repeat_n(PAD, len - src.len()));
            }
        }
        Ok(b)
    }

    pub fn caption_row(&self, i: usize) -> &[usize] {
        &self.caption[i * self.caption_len..(i + 1) * self.caption_len]
    }
}
