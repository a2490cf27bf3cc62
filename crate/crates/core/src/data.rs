//! Synthetic audio-visual corpus.
//!
//! Every token has a unit-norm audio prototype; tokens are mapped many-to-one
//! onto viseme classes, each with its own unit-norm video prototype, so
//! distinct tokens can share identical lip frames. A token lasts
//! `frames_per_token` video frames and `frames_per_token * stack_factor`
//! audio frames; frames are the prototype plus Gaussian jitter.
//!
//! All randomness is keyed by `(seed, split index)`, so a sample does not
//! depend on how many others were generated before it.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GilaError, Result};
use crate::numerics::{Purpose, RngStream, Tensor};
use crate::recognizer::TokenSeq;

pub const CORPUS_FORMAT: &str = "gila-corpus-v1";

/// Hex SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub viseme_classes: usize,
    pub frames_per_token: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub d_a_raw: usize,
    pub d_v_raw: usize,
    pub stack_factor: usize,
    pub audio_noise_std: f64,
    pub video_noise_std: f64,
    pub snr_levels: Vec<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            viseme_classes: 8,
            frames_per_token: 2,
            min_len: 3,
            max_len: 8,
            d_a_raw: 26,
            d_v_raw: 16,
            stack_factor: 4,
            audio_noise_std: 0.05,
            video_noise_std: 0.1,
            snr_levels: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            train_size: 500,
            val_size: 50,
            test_size: 100,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.viseme_classes == 0 || self.viseme_classes >= self.vocab_size {
            return Err(GilaError::config(format!(
                "viseme classes ({}) must be in 1..vocab size ({})",
                self.viseme_classes, self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(GilaError::config("utterance length range must satisfy 1 <= min <= max"));
        }
        if self.frames_per_token == 0 || self.stack_factor == 0 || self.d_a_raw == 0 || self.d_v_raw == 0 {
            return Err(GilaError::config("frame counts and feature dims must be positive"));
        }
        if !(self.audio_noise_std >= 0.0 && self.video_noise_std >= 0.0) {
            return Err(GilaError::config("jitter std must be non-negative"));
        }
        if self.snr_levels.iter().any(|s| !s.is_finite()) {
            return Err(GilaError::config("evaluation SNR levels must be finite"));
        }
        Ok(())
    }

    /// Video frames of the longest utterance.
    pub fn max_frames(&self) -> usize {
        self.max_len * self.frames_per_token
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(GilaError::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Global index; splits occupy disjoint ranges.
    pub id: usize,
    pub split: Split,
    /// Word indices in `0..vocab_size`.
    pub words: Vec<usize>,
    /// `[L * r * stack_factor, d_a_raw]`.
    pub audio: Tensor<f64>,
    /// `[L * r, d_v_raw]`.
    pub video: Tensor<f64>,
    /// `None` for clean audio.
    pub snr_db: Option<f64>,
}

impl SyntheticSample {
    pub fn tokens(&self) -> TokenSeq {
        TokenSeq::from_words(&self.words)
    }

    pub fn frames(&self) -> usize {
        self.video.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 2] = [NoiseKind::White, NoiseKind::Babble];
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub cfg: CorpusConfig,
    /// `[K, d_a_raw]`, unit-norm rows.
    pub audio_protos: Tensor<f64>,
    /// `[K_v, d_v_raw]`, unit-norm rows.
    pub video_protos: Tensor<f64>,
    pub viseme_of: Vec<usize>,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

fn unit_rows(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        let row = t.row_mut(i);
        loop {
            row.iter_mut().for_each(|x| *x = rng.normal());
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                row.iter_mut().for_each(|x| *x /= n);
                break;
            }
        }
    }
    t
}

/// Mean power `Σx² / n`.
pub fn power(x: &Tensor<f64>) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_clean / P_(noisy - clean))`.
pub fn measured_snr_db(clean: &Tensor<f64>, noisy: &Tensor<f64>) -> f64 {
    let n: f64 = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(c, y)| (y - c) * (y - c))
        .sum::<f64>()
        / clean.len() as f64;
    10.0 * (power(clean) / n).log10()
}

/// Adds `noise` scaled so that the signal-to-noise ratio is exactly
/// `snr_db`. `+inf` returns the audio unchanged.
pub fn mix_noise(audio: &Tensor<f64>, noise: &Tensor<f64>, snr_db: f64) -> Result<Tensor<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(audio.clone());
    }
    if !snr_db.is_finite() {
        return Err(GilaError::config(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    if audio.shape() != noise.shape() {
        return Err(GilaError::shape("mix_noise", audio.shape(), noise.shape()));
    }
    let (ps, pn) = (power(audio), power(noise));
    if ps == 0.0 {
        return Err(GilaError::numeric("cannot set the SNR of a zero-power signal"));
    }
    if pn == 0.0 {
        return Err(GilaError::numeric("cannot scale a zero-power noise source"));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let data = audio
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, n)| a + gain * n)
        .collect();
    Tensor::new(audio.shape(), data)
}

impl Corpus {
    /// Prototype tables only; no samples.
    pub fn prototypes(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::derive(cfg.seed, Purpose::Corpus, &[u64::MAX]);
        let audio_protos = unit_rows(cfg.vocab_size, cfg.d_a_raw, &mut rng);
        let video_protos = unit_rows(cfg.viseme_classes, cfg.d_v_raw, &mut rng);
        let viseme_of = (0..cfg.vocab_size).map(|w| w % cfg.viseme_classes).collect();
        Ok(Self {
            cfg: cfg.clone(),
            audio_protos,
            video_protos,
            viseme_of,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        })
    }

    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        let mut c = Self::prototypes(cfg)?;
        let (n_tr, n_va) = (cfg.train_size, cfg.val_size);
        c.train = (0..n_tr).map(|i| c.sample(Split::Train, i)).collect();
        c.val = (n_tr..n_tr + n_va).map(|i| c.sample(Split::Val, i)).collect();
        c.test = (n_tr + n_va..n_tr + n_va + cfg.test_size)
            .map(|i| c.sample(Split::Test, i))
            .collect();
        Ok(c)
    }

    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Words whose viseme class is shared with another word.
    pub fn homophenes(&self) -> Vec<Vec<usize>> {
        (0..self.cfg.viseme_classes)
            .map(|c| {
                (0..self.cfg.vocab_size)
                    .filter(|&w| self.viseme_of[w] == c)
                    .collect::<Vec<_>>()
            })
            .filter(|g| g.len() > 1)
            .collect()
    }

    /// Deterministic sample number `id`.
    pub fn sample(&self, split: Split, id: usize) -> SyntheticSample {
        let cfg = &self.cfg;
        let mut rng = RngStream::derive(cfg.seed, Purpose::Corpus, &[id as u64]);
        let len = rng.below(cfg.min_len, cfg.max_len + 1);
        let words: Vec<usize> = (0..len).map(|_| rng.below(0, cfg.vocab_size)).collect();
        let audio = self.render_audio(&words, cfg.audio_noise_std, &mut rng);
        let video = self.render_video(&words, &mut rng);
        SyntheticSample {
            id,
            split,
            words,
            audio,
            video,
            snr_db: None,
        }
    }

    fn render_audio(&self, words: &[usize], std: f64, rng: &mut RngStream) -> Tensor<f64> {
        let cfg = &self.cfg;
        let per = cfg.frames_per_token * cfg.stack_factor;
        let mut t = Tensor::zeros(&[words.len() * per, cfg.d_a_raw]);
        for (k, &w) in words.iter().enumerate() {
            for f in 0..per {
                let row = t.row_mut(k * per + f);
                for (x, &p) in row.iter_mut().zip(self.audio_protos.row(w)) {
                    *x = p + std * rng.normal();
                }
            }
        }
        t
    }

    fn render_video(&self, words: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        let cfg = &self.cfg;
        let per = cfg.frames_per_token;
        let mut t = Tensor::zeros(&[words.len() * per, cfg.d_v_raw]);
        for (k, &w) in words.iter().enumerate() {
            let proto = self.video_protos.row(self.viseme_of[w]);
            for f in 0..per {
                let row = t.row_mut(k * per + f);
                for (x, &p) in row.iter_mut().zip(proto) {
                    *x = p + cfg.video_noise_std * rng.normal();
                }
            }
        }
        t
    }

    /// Interferer with `rows` audio frames: Gaussian white noise, or a
    /// rendered utterance of random words.
    pub fn noise(&self, kind: NoiseKind, rows: usize, rng: &mut RngStream) -> Tensor<f64> {
        let cols = self.cfg.d_a_raw;
        match kind {
            NoiseKind::White => {
                let data = (0..rows * cols).map(|_| rng.normal()).collect();
                Tensor::new(&[rows, cols], data).expect("consistent shape")
            }
            NoiseKind::Babble => {
                let per = self.cfg.frames_per_token * self.cfg.stack_factor;
                let words: Vec<usize> = (0..rows.div_ceil(per))
                    .map(|_| rng.below(0, self.cfg.vocab_size))
                    .collect();
                let full = self.render_audio(&words, self.cfg.audio_noise_std, rng);
                Tensor::new(&[rows, cols], full.data()[..rows * cols].to_vec()).expect("consistent shape")
            }
        }
    }

    /// Copy of `sample` with its audio mixed with `kind` noise at `snr_db`.
    pub fn noisy(
        &self,
        sample: &SyntheticSample,
        kind: NoiseKind,
        snr_db: f64,
        rng: &mut RngStream,
    ) -> Result<SyntheticSample> {
        let noise = self.noise(kind, sample.audio.rows(), rng);
        let audio = mix_noise(&sample.audio, &noise, snr_db)?;
        Ok(SyntheticSample {
            audio,
            snr_db: Some(snr_db),
            ..sample.clone()
        })
    }

    /// Evaluation copy of `sample`, keyed by the noise family and SNR so
    /// every model sees the same interferer.
    pub fn eval_noisy(&self, sample: &SyntheticSample, kind: NoiseKind, snr_db: f64) -> Result<SyntheticSample> {
        let family = match kind {
            NoiseKind::White => 0,
            NoiseKind::Babble => 1,
        };
        let mut rng = RngStream::derive(
            self.cfg.seed,
            Purpose::EvalNoise,
            &[sample.id as u64, family, snr_db.to_bits()],
        );
        self.noisy(sample, kind, snr_db, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    None,
    /// With probability `p_noise`, replace the audio by a noisy mix.
    NoiseAug,
    /// Always emit the clean flow and a noisy flow sharing video and target.
    DataAug,
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub sample: SyntheticSample,
    pub clean: bool,
}

/// One training flow (`none`, `noise_aug`) or a clean/noisy pair
/// (`data_aug`). The noise family is drawn uniformly.
pub fn dual_flow_batch(
    corpus: &Corpus,
    sample: &SyntheticSample,
    mode: AugMode,
    p_noise: f64,
    snr_db: f64,
    rng: &mut RngStream,
) -> Result<Vec<Flow>> {
    let noisy = |rng: &mut RngStream| -> Result<Flow> {
        let kind = NoiseKind::ALL[rng.below(0, NoiseKind::ALL.len())];
        Ok(Flow {
            sample: corpus.noisy(sample, kind, snr_db, rng)?,
            clean: false,
        })
    };
    let clean = Flow {
        sample: sample.clone(),
        clean: true,
    };
    Ok(match mode {
        AugMode::None => vec![clean],
        AugMode::NoiseAug => {
            if rng.bernoulli(p_noise) {
                vec![noisy(rng)?]
            } else {
                vec![clean]
            }
        }
        AugMode::DataAug => vec![clean, noisy(rng)?],
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportHeader {
    format: String,
    config_hash: String,
    config: CorpusConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportRecord {
    id: usize,
    split: Split,
    words: Vec<usize>,
    audio_shape: [usize; 2],
    audio: String,
    video_shape: [usize; 2],
    video: String,
}

fn encode_f32(t: &Tensor<f64>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(s: &str, shape: [usize; 2]) -> Result<Tensor<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| GilaError::Corpus(format!("bad base64 payload: {e}")))?;
    if bytes.len() != shape[0] * shape[1] * 4 {
        return Err(GilaError::Corpus(format!(
            "payload of {} bytes does not match shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(&shape, data)
}

/// Writes a header line and one JSON record per sample.
pub fn export_jsonl<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let header = ExportHeader {
        format: CORPUS_FORMAT.into(),
        config_hash: config_hash(&corpus.cfg)?,
        config: corpus.cfg.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
        let rec = ExportRecord {
            id: s.id,
            split: s.split,
            words: s.words.clone(),
            audio_shape: [s.audio.rows(), s.audio.cols()],
            audio: encode_f32(&s.audio),
            video_shape: [s.video.rows(), s.video.cols()],
            video: encode_f32(&s.video),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Reads an export back; frames come back at 32-bit precision.
pub fn import_jsonl<B: BufRead>(input: B) -> Result<(CorpusConfig, Vec<SyntheticSample>)> {
    let mut lines = input.lines();
    let head = lines
        .next()
        .ok_or_else(|| GilaError::Corpus("empty corpus file".into()))??;
    let header: ExportHeader = serde_json::from_str(&head)?;
    if header.format != CORPUS_FORMAT {
        return Err(GilaError::Corpus(format!(
            "unsupported corpus format {:?}",
            header.format
        )));
    }
    if config_hash(&header.config)? != header.config_hash {
        return Err(GilaError::Corpus(
            "config hash does not match the embedded config".into(),
        ));
    }
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ExportRecord = serde_json::from_str(&line)?;
        samples.push(SyntheticSample {
            id: r.id,
            split: r.split,
            words: r.words,
            audio: decode_f32(&r.audio, r.audio_shape)?,
            video: decode_f32(&r.video, r.video_shape)?,
            snr_db: None,
        });
    }
    Ok((header.config, samples))
}
