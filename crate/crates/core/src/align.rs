//! Frame-level contrastive alignment between the audio and visual streams.
//!
//! Within-layer terms contrast `F_A^i` against `F_V^i` over all frames of the
//! utterance. Cross-layer terms sample spans of frames, quantize one side
//! with a Gumbel-softmax codebook, and contrast `X_A^j` against the
//! quantized `X_V^k` (and the reverse) with up to `n_negatives` distractors
//! per frame.

use serde::{Deserialize, Serialize};

use crate::error::{GilaError, Result};
use crate::gi::ModalTrace;
use crate::numerics::{
    argmax, cosine_matrix, gumbel_softmax, Ctx, GumbelNoise, Linear, ParamId, ParamStore, Real, RngStream, Tape,
    Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlTerm {
    pub layer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClPair {
    pub j: usize,
    pub k: usize,
    pub weight: f64,
    /// Per-frame probability of starting a sampled span.
    pub span_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub groups: usize,
    pub entries: usize,
    pub tau_start: f64,
    pub tau_decay: f64,
    pub tau_floor: f64,
    /// Weight of the codebook-usage diversity penalty; 0 disables it.
    pub diversity_weight: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            entries: 32,
            tau_start: 2.0,
            tau_decay: 0.9995,
            tau_floor: 0.5,
            diversity_weight: 0.0,
        }
    }
}

impl CodebookConfig {
    /// Annealed Gumbel temperature after `step` updates.
    pub fn temperature(&self, step: u64) -> f64 {
        (self.tau_start * self.tau_decay.powf(step as f64)).max(self.tau_floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub tau: f64,
    pub within: Vec<WlTerm>,
    pub cross: Vec<ClPair>,
    pub span_len: usize,
    pub n_negatives: usize,
    pub codebook: CodebookConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            within: (1..=3).map(|layer| WlTerm { layer, weight: 0.001 }).collect(),
            cross: vec![
                ClPair {
                    j: 0,
                    k: 3,
                    weight: 0.08,
                    span_prob: 0.4,
                },
                ClPair {
                    j: 3,
                    k: 0,
                    weight: 0.01,
                    span_prob: 0.45,
                },
            ],
            span_len: 10,
            n_negatives: 100,
            codebook: CodebookConfig::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self, layers: usize, d: usize) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(GilaError::config("alignment temperature must be positive"));
        }
        if self.span_len == 0 {
            return Err(GilaError::config("span_len must be at least 1"));
        }
        for w in &self.within {
            if w.weight < 0.0 || w.layer == 0 || w.layer > layers {
                return Err(GilaError::config(format!(
                    "bad within-layer term {w:?} for {layers} layers"
                )));
            }
        }
        for p in &self.cross {
            if p.weight < 0.0 || p.j == p.k || p.j > layers || p.k > layers || !(0.0..=1.0).contains(&p.span_prob) {
                return Err(GilaError::config(format!(
                    "bad cross-layer pair {p:?} for {layers} layers"
                )));
            }
        }
        let cb = &self.codebook;
        if cb.groups == 0 || d % cb.groups != 0 || cb.entries == 0 {
            return Err(GilaError::config(format!(
                "codebook groups {} must divide model dim {d}",
                cb.groups
            )));
        }
        Ok(())
    }

    pub fn uses_codebooks(&self) -> bool {
        self.cross.iter().any(|p| p.weight > 0.0)
    }
}

/// `L^{a2v}` and `L^{v2a}` averaged, each summed over frames.
pub fn within_layer_loss<R: Real>(tape: &mut Tape<R>, f_a: Var, f_v: Var, tau: f64) -> Result<Var> {
    if tape.shape(f_a) != tape.shape(f_v) {
        return Err(GilaError::shape(
            "within_layer_loss",
            tape.value(f_a).shape(),
            tape.value(f_v).shape(),
        ));
    }
    let t = tape.shape(f_a).0;
    let rows: Vec<(Vec<usize>, usize)> = (0..t).map(|i| ((0..t).collect(), i)).collect();
    symmetric_nce(tape, f_a, f_v, f_v, f_a, &rows, tau)
}

/// Averages InfoNCE of `anchor_a` against `target_v` and of `anchor_v`
/// against `target_a`, with shared candidate sets.
fn symmetric_nce<R: Real>(
    tape: &mut Tape<R>,
    anchor_a: Var,
    target_v: Var,
    anchor_v: Var,
    target_a: Var,
    rows: &[(Vec<usize>, usize)],
    tau: f64,
) -> Result<Var> {
    let s_av = cosine_matrix(tape, anchor_a, target_v)?;
    let l_a2v = tape.info_nce(s_av, rows, tau)?;
    let s_va = cosine_matrix(tape, anchor_v, target_a)?;
    let l_v2a = tape.info_nce(s_va, rows, tau)?;
    let sum = tape.add(l_a2v, l_v2a)?;
    tape.scale(sum, R::of(0.5))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanSample {
    pub starts: Vec<usize>,
    /// Sorted, deduplicated union of the spans.
    pub indices: Vec<usize>,
}

/// Each frame independently starts a span of `span_len` frames with
/// probability `prob`; overlapping spans merge.
pub fn sample_frame_spans(frames: usize, prob: f64, span_len: usize, rng: &mut RngStream) -> SpanSample {
    let mut starts = Vec::new();
    let mut covered = vec![false; frames];
    for t in 0..frames {
        if rng.bernoulli(prob) {
            starts.push(t);
            for c in covered.iter_mut().take((t + span_len).min(frames)).skip(t) {
                *c = true;
            }
        }
    }
    let indices = (0..frames).filter(|&t| covered[t]).collect();
    SpanSample { starts, indices }
}

/// Grouped vector quantizer: a linear map to `G x V` logits, one
/// Gumbel-softmax choice per group, and the chosen entries concatenated.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub logits_proj: Linear,
    /// One `[V, d / G]` table per group.
    pub entries: Vec<ParamId>,
    pub groups: usize,
    pub entries_per_group: usize,
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub z: Var,
    /// Per-group `[T', V]` selections (one-hot in value).
    pub selections: Vec<Var>,
    /// Per-group `[T', V]` logits.
    pub logits: Vec<Var>,
}

impl Codebook {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d: usize,
        cfg: &CodebookConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if cfg.groups == 0 || d % cfg.groups != 0 {
            return Err(GilaError::config(format!(
                "codebook groups {} must divide {d}",
                cfg.groups
            )));
        }
        let logits_proj = Linear::new(store, &format!("{name}.logits"), d, cfg.groups * cfg.entries, true, rng)?;
        let entries = (0..cfg.groups)
            .map(|g| store.add_normal(format!("{name}.entries.{g}"), &[cfg.entries, d / cfg.groups], 1.0, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            logits_proj,
            entries,
            groups: cfg.groups,
            entries_per_group: cfg.entries,
        })
    }

    /// Per-group logits for each frame.
    pub fn logits<R: Real>(&self, cx: &mut Ctx<'_, R>, frames: Var) -> Result<Vec<Var>> {
        let all = self.logits_proj.forward(cx, frames)?;
        let v = self.entries_per_group;
        (0..self.groups).map(|g| cx.tape.slice_cols(all, g * v, v)).collect()
    }

    /// `concat_g(selection_g · entries_g)`.
    pub fn assemble<R: Real>(&self, cx: &mut Ctx<'_, R>, selections: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.groups);
        for (g, &sel) in selections.iter().enumerate() {
            let table = cx.p(self.entries[g]);
            parts.push(cx.tape.matmul(sel, table)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            cx.tape.concat_cols(&parts)
        }
    }

    /// Train mode: hard Gumbel-softmax with straight-through gradients.
    /// Eval mode: plain argmax of the logits.
    pub fn quantize<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        frames: Var,
        temperature: f64,
        mut noise: Option<&mut RngStream>,
    ) -> Result<Quantized> {
        let logits = self.logits(cx, frames)?;
        let mut selections = Vec::with_capacity(self.groups);
        for &l in &logits {
            let sel = if cx.train() {
                let noise = match noise.as_deref_mut() {
                    Some(rng) => GumbelNoise::Sample(rng),
                    None => GumbelNoise::Off,
                };
                gumbel_softmax(&mut cx.tape, l, temperature, true, noise)?
            } else {
                let v = cx.value(l);
                let mut onehot = Tensor::<R>::zeros(v.shape());
                for i in 0..v.rows() {
                    onehot.set(i, argmax(v.row(i)), R::one());
                }
                cx.input(onehot)?
            };
            selections.push(sel);
        }
        let z = self.assemble(cx, &selections)?;
        Ok(Quantized { z, selections, logits })
    }

    /// `(G·V - Σ_g perplexity_g) / (G·V)` over the softmax of the logits
    /// averaged across frames.
    pub fn diversity_penalty<R: Real>(&self, cx: &mut Ctx<'_, R>, logits: &[Var]) -> Result<Var> {
        let total = (self.groups * self.entries_per_group) as f64;
        let mut perplexity: Option<Var> = None;
        for &l in logits {
            let rows = cx.tape.shape(l).0;
            let p = cx.tape.softmax(l, false)?;
            let ones = cx.input(Tensor::full(&[1, rows], R::of(1.0 / rows as f64)))?;
            let avg = cx.tape.matmul(ones, p)?;
            let logp = cx.tape.log(avg)?;
            let plogp = cx.tape.mul(avg, logp)?;
            let neg_h = cx.tape.sum(plogp)?;
            let h = cx.tape.scale(neg_h, -R::one())?;
            let ppl = cx.tape.exp(h)?;
            perplexity = Some(match perplexity {
                Some(acc) => cx.tape.add(acc, ppl)?,
                None => ppl,
            });
        }
        let ppl = perplexity.ok_or(GilaError::EmptySequence("diversity_penalty"))?;
        let neg = cx.tape.scale(ppl, R::of(-1.0 / total))?;
        let one = cx.input(Tensor::full(&[1, 1], R::one()))?;
        cx.tape.add(one, neg)
    }
}

/// Candidate sets for the cross-layer contrast.
pub enum Negatives<'a> {
    /// Up to `n` distinct distractors per frame, uniform over the other
    /// sampled frames.
    Sample { n: usize, rng: &'a mut RngStream },
    /// Every sampled frame is a candidate.
    All,
}

/// How the targets of the cross-layer contrast are produced.
pub enum Targets<'a> {
    Quantized {
        audio: &'a Codebook,
        visual: &'a Codebook,
        temperature: f64,
        noise: Option<&'a mut RngStream>,
    },
    /// Raw frames stand in for the quantized ones.
    Raw,
}

/// Candidate rows `({t} ∪ negatives, t)` for `n` sampled frames.
pub fn candidate_sets(n: usize, negatives: Negatives<'_>) -> Vec<(Vec<usize>, usize)> {
    match negatives {
        Negatives::All => (0..n).map(|t| ((0..n).collect(), t)).collect(),
        Negatives::Sample { n: k, rng } => (0..n)
            .map(|t| {
                let others: Vec<usize> = (0..n).filter(|&o| o != t).collect();
                let mut c = vec![t];
                c.extend(rng.choose_distinct(&others, k.min(n - 1)));
                (c, t)
            })
            .collect(),
    }
}

/// Cross-layer contrastive loss between `X_A^j` and `X_V^k` on the sampled
/// frames `idx`. Zero when fewer than two frames are sampled.
pub fn cross_layer_loss<R: Real>(
    cx: &mut Ctx<'_, R>,
    x_a: Var,
    x_v: Var,
    idx: &[usize],
    targets: Targets<'_>,
    negatives: Negatives<'_>,
    tau: f64,
) -> Result<Var> {
    if cx.tape.shape(x_a) != cx.tape.shape(x_v) {
        return Err(GilaError::shape(
            "cross_layer_loss",
            cx.value(x_a).shape(),
            cx.value(x_v).shape(),
        ));
    }
    if idx.len() <= 1 {
        return cx.input(Tensor::zeros(&[1, 1]));
    }
    let a = cx.tape.gather_rows(x_a, idx)?;
    let v = cx.tape.gather_rows(x_v, idx)?;
    let (z_a, z_v) = match targets {
        Targets::Raw => (a, v),
        Targets::Quantized {
            audio,
            visual,
            temperature,
            mut noise,
        } => {
            let z_a = audio.quantize(cx, a, temperature, noise.as_deref_mut())?.z;
            let z_v = visual.quantize(cx, v, temperature, noise)?.z;
            (z_a, z_v)
        }
    };
    let rows = candidate_sets(idx.len(), negatives);
    symmetric_nce(&mut cx.tape, a, z_v, v, z_a, &rows, tau)
}

/// Separate quantizers for the audio and visual streams.
#[derive(Debug, Clone)]
pub struct Codebooks {
    pub audio: Codebook,
    pub visual: Codebook,
}

impl Codebooks {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        d: usize,
        cfg: &CodebookConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            audio: Codebook::new(store, "vq.audio", d, cfg, rng)?,
            visual: Codebook::new(store, "vq.visual", d, cfg, rng)?,
        })
    }
}

/// Streams consumed by one evaluation of the alignment loss.
pub struct AlignRng<'a> {
    pub spans: &'a mut RngStream,
    pub negatives: &'a mut RngStream,
    pub gumbel: &'a mut RngStream,
}

#[derive(Debug, Clone)]
pub struct AlignTerms {
    /// `(layer, L_WL)` for every weighted within-layer term.
    pub within: Vec<(usize, Var)>,
    /// `((j, k), L_CL)` for every weighted cross-layer pair.
    pub cross: Vec<((usize, usize), Var)>,
    pub diversity: Option<Var>,
    /// `Σ λ_WL · L_WL + Σ λ_CL · L_CL (+ diversity)`.
    pub total: Var,
}

/// Weighted sum of the within-layer and cross-layer terms. Terms with zero
/// weight are skipped entirely.
pub fn local_alignment_loss<R: Real>(
    cx: &mut Ctx<'_, R>,
    trace: &ModalTrace,
    cfg: &AlignConfig,
    codebooks: Option<&Codebooks>,
    temperature: f64,
    rng: AlignRng<'_>,
) -> Result<AlignTerms> {
    let mut weighted = Vec::new();
    let mut within = Vec::new();
    for term in cfg.within.iter().filter(|w| w.weight > 0.0) {
        let l = trace
            .layers
            .get(term.layer.wrapping_sub(1))
            .ok_or_else(|| GilaError::config(format!("no layer {} in trace", term.layer)))?;
        let loss = within_layer_loss(&mut cx.tape, l.f_a, l.f_v, cfg.tau)?;
        within.push((term.layer, loss));
        weighted.push(cx.tape.scale(loss, R::of(term.weight))?);
    }
    let mut cross = Vec::new();
    let mut diversity = None;
    for pair in cfg.cross.iter().filter(|p| p.weight > 0.0) {
        let books = codebooks.ok_or_else(|| GilaError::config("cross-layer terms need codebooks"))?;
        let (x_a, x_v) = match (trace.x_a(pair.j), trace.x_v(pair.k)) {
            (Some(a), Some(v)) => (a, v),
            _ => {
                return Err(GilaError::config(format!(
                    "pair ({}, {}) outside the trace",
                    pair.j, pair.k
                )))
            }
        };
        let frames = cx.tape.shape(x_a).0;
        let spans = sample_frame_spans(frames, pair.span_prob, cfg.span_len, rng.spans);
        let loss = cross_layer_loss(
            cx,
            x_a,
            x_v,
            &spans.indices,
            Targets::Quantized {
                audio: &books.audio,
                visual: &books.visual,
                temperature,
                noise: Some(&mut *rng.gumbel),
            },
            Negatives::Sample {
                n: cfg.n_negatives,
                rng: &mut *rng.negatives,
            },
            cfg.tau,
        )?;
        cross.push(((pair.j, pair.k), loss));
        weighted.push(cx.tape.scale(loss, R::of(pair.weight))?);
        if cfg.codebook.diversity_weight > 0.0 && spans.indices.len() > 1 {
            let a = cx.tape.gather_rows(x_a, &spans.indices)?;
            let v = cx.tape.gather_rows(x_v, &spans.indices)?;
            let la = books.audio.logits(cx, a)?;
            let lv = books.visual.logits(cx, v)?;
            let pa = books.audio.diversity_penalty(cx, &la)?;
            let pv = books.visual.diversity_penalty(cx, &lv)?;
            let p = cx.tape.add(pa, pv)?;
            let p = cx.tape.scale(p, R::of(cfg.codebook.diversity_weight))?;
            diversity = Some(match diversity {
                Some(acc) => cx.tape.add(acc, p)?,
                None => p,
            });
            weighted.push(p);
        }
    }
    let total = match weighted.split_first() {
        None => cx.input(Tensor::zeros(&[1, 1]))?,
        Some((&first, rest)) => {
            let mut acc = first;
            for &w in rest {
                acc = cx.tape.add(acc, w)?;
            }
            acc
        }
    };
    Ok(AlignTerms {
        within,
        cross,
        diversity,
        total,
    })
}
