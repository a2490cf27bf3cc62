use serde::{Deserialize, Serialize};

use crate::data::{Corpus, NoiseKind, Split, SyntheticSample};
use crate::error::{GilaError, Result};
use crate::numerics::Real;
use crate::recognizer::{edit_distance, TokenSeq};

use super::model::GilaModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseEval {
    Clean,
    /// Every noise family at every SNR level of the corpus config.
    Grid,
}

impl NoiseEval {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "grid" => Ok(Self::Grid),
            other => Err(GilaError::config(format!("unknown noise setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub noise: NoiseKind,
    pub snr_db: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub utterances: usize,
    pub wer_clean: f64,
    /// Mean WER over every noise family and SNR level.
    pub wer_noisy_avg: Option<f64>,
    pub per_condition: Vec<Condition>,
}

/// `Σ edits / Σ reference words` over paired transcripts.
pub fn corpus_wer(refs: &[TokenSeq], hyps: &[TokenSeq]) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        let r = r.transcript();
        edits += edit_distance(&r, &h.transcript());
        words += r.len();
    }
    if words == 0 {
        return Err(GilaError::EmptySequence("reference transcripts"));
    }
    Ok(edits as f64 / words as f64)
}

fn wer_on<R: Real>(model: &mut GilaModel<R>, samples: &[SyntheticSample]) -> Result<f64> {
    let refs: Vec<TokenSeq> = samples.iter().map(SyntheticSample::tokens).collect();
    let hyps = samples.iter().map(|s| model.decode(s)).collect::<Result<Vec<_>>>()?;
    corpus_wer(&refs, &hyps)
}

pub fn evaluate<R: Real>(
    model: &mut GilaModel<R>,
    corpus: &Corpus,
    split: Split,
    noise: NoiseEval,
) -> Result<EvalReport> {
    let samples = corpus.split(split);
    if samples.is_empty() {
        return Err(GilaError::EmptySequence("evaluation split"));
    }
    let wer_clean = wer_on(model, samples)?;
    let mut per_condition = Vec::new();
    if noise == NoiseEval::Grid {
        for kind in NoiseKind::ALL {
            for &snr in &corpus.cfg.snr_levels {
                let noisy = samples
                    .iter()
                    .map(|s| corpus.eval_noisy(s, kind, snr))
                    .collect::<Result<Vec<_>>>()?;
                let wer = wer_on(model, &noisy)?;
                log::info!("{kind:?} {snr:+} dB: WER {:.2}%", 100.0 * wer);
                per_condition.push(Condition {
                    noise: kind,
                    snr_db: snr,
                    wer,
                });
            }
        }
    }
    let wer_noisy_avg = (!per_condition.is_empty())
        .then(|| per_condition.iter().map(|c| c.wer).sum::<f64>() / per_condition.len() as f64);
    Ok(EvalReport {
        split,
        utterances: samples.len(),
        wer_clean,
        wer_noisy_avg,
        per_condition,
    })
}
