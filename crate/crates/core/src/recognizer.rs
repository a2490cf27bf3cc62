//! Multimodal fusion, Transformer encoder-decoder, decoding and WER.

use serde::{Deserialize, Serialize};

use crate::error::{GilaError, Result};
use crate::numerics::{
    positions, sinusoidal_table, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real,
    RngStream, Tensor, Var,
};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Id of the first word; word `w` has id `w + FIRST_WORD`.
pub const FIRST_WORD: usize = 3;

/// A token id sequence over the recognizer vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn from_words(words: &[usize]) -> Self {
        Self {
            ids: words.iter().map(|w| w + FIRST_WORD).collect(),
        }
    }

    /// Word indices, dropping specials.
    pub fn words(&self) -> Vec<usize> {
        self.ids
            .iter()
            .filter(|&&i| i >= FIRST_WORD)
            .map(|i| i - FIRST_WORD)
            .collect()
    }

    /// Ids up to (excluding) the first `eos`, with specials removed.
    pub fn transcript(&self) -> Vec<usize> {
        self.ids
            .iter()
            .take_while(|&&i| i != EOS)
            .copied()
            .filter(|&i| i >= FIRST_WORD)
            .collect()
    }

    pub fn with_eos(&self) -> Self {
        let mut ids = self.ids.clone();
        if !ids.contains(&EOS) {
            ids.push(EOS);
        }
        Self { ids }
    }

    pub fn render(&self, names: &[String]) -> String {
        self.transcript()
            .iter()
            .map(|&i| names.get(i - FIRST_WORD).map_or_else(|| format!("<{i}>"), Clone::clone))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Vocabulary size including the three specials.
    pub vocab: usize,
    /// Longest decoder input, counting `sos`.
    pub max_target_len: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

fn residual<R: Real>(cx: &mut Ctx<'_, R>, x: Var, sub: Var, ln: &LayerNorm) -> Result<Var> {
    let sub = cx.dropout(sub)?;
    let s = cx.tape.add(x, sub)?;
    ln.forward(cx, s)
}

impl EncoderLayer {
    fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let a = self.attn.forward(cx, x, x, x, false)?.out;
        let x = residual(cx, x, a, &self.ln1)?;
        let f = self.ffn.forward(cx, x)?;
        residual(cx, x, f, &self.ln2)
    }
}

impl DecoderLayer {
    fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, y: Var, memory: Var) -> Result<Var> {
        let a = self.self_attn.forward(cx, y, y, y, true)?.out;
        let y = residual(cx, y, a, &self.ln1)?;
        let c = self.cross_attn.forward(cx, y, memory, memory, false)?.out;
        let y = residual(cx, y, c, &self.ln2)?;
        let f = self.ffn.forward(cx, y)?;
        residual(cx, y, f, &self.ln3)
    }
}

#[derive(Debug, Clone)]
pub struct Recognizer {
    pub cfg: RecognizerConfig,
    pub fuse_proj: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    pub token_embed: ParamId,
    pub output_proj: Linear,
    posenc: Tensor<f64>,
}

impl Recognizer {
    /// `input_dim` is the width of the fused feature fed to `fuse_proj`.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        cfg: RecognizerConfig,
        input_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if cfg.vocab <= FIRST_WORD {
            return Err(GilaError::config("vocabulary has no words"));
        }
        if cfg.max_target_len == 0 {
            return Err(GilaError::config("max_target_len must be positive"));
        }
        let d = cfg.d;
        let fuse_proj = Linear::new(store, "asr.fuse", input_dim, d, true, rng)?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("asr.enc.{i}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), d, cfg.heads, rng)?,
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d)?,
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, cfg.d_ff, rng)?,
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("asr.dec.{i}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), d, cfg.heads, rng)?,
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), d, cfg.heads, rng)?,
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d)?,
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, cfg.d_ff, rng)?,
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let token_embed = store.add_normal("asr.token_embed", &[cfg.vocab, d], 1.0, rng)?;
        let output_proj = Linear::new(store, "asr.output", d, cfg.vocab, true, rng)?;
        Ok(Self {
            fuse_proj,
            encoder,
            decoder,
            token_embed,
            output_proj,
            posenc: sinusoidal_table(cfg.max_target_len, d),
            cfg,
        })
    }

    /// `X_MM = [parts...] W_f + b`; every part must have the same shape.
    pub fn fuse<R: Real>(&self, cx: &mut Ctx<'_, R>, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(GilaError::EmptySequence("fuse"))?;
        let shape = cx.tape.shape(*first);
        for &p in &parts[1..] {
            if cx.tape.shape(p) != shape {
                return Err(GilaError::shape("fuse", cx.value(*first).shape(), cx.value(p).shape()));
            }
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            cx.tape.concat_cols(parts)?
        };
        self.fuse_proj.forward(cx, cat)
    }

    pub fn encode<R: Real>(&self, cx: &mut Ctx<'_, R>, x_mm: Var) -> Result<Var> {
        let mut x = x_mm;
        for layer in &self.encoder {
            x = layer.forward(cx, x)?;
        }
        Ok(x)
    }

    /// Next-token logits `[L, |V|]` for every prefix of `inputs`.
    pub fn decode_logits<R: Real>(&self, cx: &mut Ctx<'_, R>, memory: Var, inputs: &[usize]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(GilaError::EmptySequence("decoder input"));
        }
        if inputs.len() > self.cfg.max_target_len {
            return Err(GilaError::config(format!(
                "decoder input of {} tokens exceeds the position table ({})",
                inputs.len(),
                self.cfg.max_target_len
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.cfg.vocab) {
            return Err(GilaError::config(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        let table = cx.p(self.token_embed);
        let emb = cx.tape.gather_rows(table, inputs)?;
        let pos = positions(cx, &self.posenc.cast::<R>(), inputs.len())?;
        let mut y = cx.tape.add(emb, pos)?;
        for layer in &self.decoder {
            y = layer.forward(cx, y, memory)?;
        }
        self.output_proj.forward(cx, y)
    }

    /// Teacher-forced cross-entropy of `target + eos` given `sos + target`.
    /// Labels after the first `eos` that are `pad` are ignored.
    pub fn asr_loss<R: Real>(&self, cx: &mut Ctx<'_, R>, memory: Var, target: &TokenSeq) -> Result<Var> {
        if target.transcript().is_empty() {
            return Err(GilaError::EmptySequence("target"));
        }
        let seq = target.with_eos().ids;
        let mut inputs = Vec::with_capacity(seq.len());
        inputs.push(SOS);
        inputs.extend_from_slice(&seq[..seq.len() - 1]);
        let labels: Vec<Option<usize>> = seq.iter().map(|&i| (i != PAD).then_some(i)).collect();
        let logits = self.decode_logits(cx, memory, &inputs)?;
        cx.tape.cross_entropy(logits, &labels)
    }

    fn next_log_probs<R: Real>(&self, cx: &mut Ctx<'_, R>, memory: Var, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.decode_logits(cx, memory, prefix)?;
        let lp = cx.tape.log_softmax(logits)?;
        let v = cx.value(lp);
        Ok(v.row(v.rows() - 1).iter().map(|x| x.as_f64()).collect())
    }

    /// Argmax decoding from `sos` until `eos` or `max_len` tokens.
    pub fn greedy_decode<R: Real>(&self, cx: &mut Ctx<'_, R>, memory: Var, max_len: usize) -> Result<TokenSeq> {
        if max_len == 0 {
            return Err(GilaError::config("max_len must be at least 1"));
        }
        let max_len = max_len.min(self.cfg.max_target_len);
        let mut prefix = vec![SOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_log_probs(cx, memory, &prefix)?;
            let next = best_token(&lp);
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(TokenSeq::new(out))
    }

    /// Beam search scoring finished hypotheses by
    /// `log p / len^length_penalty`, where `len` counts `eos`.
    pub fn beam_decode<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        memory: Var,
        width: usize,
        length_penalty: f64,
        max_len: usize,
    ) -> Result<TokenSeq> {
        if width == 0 || max_len == 0 {
            return Err(GilaError::config("beam width and max_len must be at least 1"));
        }
        let max_len = max_len.min(self.cfg.max_target_len);
        let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        let norm = |len: usize, score: f64| score / (len as f64).powf(length_penalty);
        while !live.is_empty() && finished.len() < width {
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for (b, (toks, score)) in live.iter().enumerate() {
                let mut prefix = vec![SOS];
                prefix.extend_from_slice(toks);
                let lp = self.next_log_probs(cx, memory, &prefix)?;
                for (tok, &l) in lp.iter().enumerate() {
                    if tok == PAD || tok == SOS {
                        continue;
                    }
                    cands.push((b, tok, score + l));
                }
            }
            cands.sort_by(|x, y| y.2.total_cmp(&x.2));
            let mut next = Vec::with_capacity(width);
            for (b, tok, score) in cands.into_iter().take(width) {
                let mut toks = live[b].0.clone();
                if tok == EOS {
                    finished.push((toks.clone(), norm(toks.len() + 1, score)));
                } else {
                    toks.push(tok);
                    if toks.len() >= max_len {
                        finished.push((toks.clone(), norm(toks.len(), score)));
                    } else {
                        next.push((toks, score));
                    }
                }
            }
            live = next;
        }
        let best = finished
            .into_iter()
            .fold(None::<(Vec<usize>, f64)>, |acc, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            })
            .map(|(t, _)| t)
            .unwrap_or_default();
        Ok(TokenSeq::new(best))
    }
}

fn best_token(lp: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &l) in lp.iter().enumerate() {
        if i == PAD || i == SOS {
            continue;
        }
        if l > lp[best] {
            best = i;
        }
    }
    best
}

/// Levenshtein distance with unit substitution, insertion and deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over transcripts divided by the reference length.
pub fn word_error_rate(reference: &TokenSeq, hypothesis: &TokenSeq) -> Result<f64> {
    let r = reference.transcript();
    if r.is_empty() {
        return Err(GilaError::EmptySequence("reference transcript"));
    }
    Ok(edit_distance(&r, &hypothesis.transcript()) as f64 / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_hand_cases() {
        let r = TokenSeq::new(vec![3, 4, 5]);
        assert_eq!(word_error_rate(&r, &r).unwrap(), 0.0);
        let h = TokenSeq::new(vec![3, 9, 5]);
        assert!((word_error_rate(&r, &h).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let one = TokenSeq::new(vec![7]);
        assert_eq!(word_error_rate(&one, &TokenSeq::default()).unwrap(), 1.0);
        assert_eq!(word_error_rate(&one, &TokenSeq::new(vec![7, 8, 9])).unwrap(), 2.0);
        assert!(word_error_rate(&TokenSeq::default(), &one).is_err());
    }

    #[test]
    fn transcript_stops_at_eos() {
        let t = TokenSeq::new(vec![5, 6, EOS, PAD, 7]);
        assert_eq!(t.transcript(), vec![5, 6]);
        assert_eq!(TokenSeq::new(vec![5]).with_eos().ids, vec![5, EOS]);
        assert_eq!(TokenSeq::from_words(&[0, 2]).ids, vec![3, 5]);
        assert_eq!(TokenSeq::from_words(&[0, 2]).words(), vec![0, 2]);
    }

    #[test]
    fn edit_distance_classic() {
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance::<u8>(b"", b"abc"), 3);
    }

    use crate::numerics::{Adam, Mode};

    fn small(store: &mut ParamStore<f64>, seed: u64) -> Recognizer {
        let cfg = RecognizerConfig {
            d: 8,
            heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            vocab: 12,
            max_target_len: 10,
        };
        Recognizer::new(store, cfg, 24, &mut RngStream::new(seed, 1)).unwrap()
    }

    fn random(seed: u64, t: usize, d: usize) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 2);
        let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn fusion_cases() {
        let mut store = ParamStore::<f64>::new();
        let rec = small(&mut store, 1);
        let bias = random(3, 1, 8);
        store.set_value(rec.fuse_proj.b.unwrap(), bias.clone()).unwrap();
        let w = store.get(rec.fuse_proj.w).tensor.clone();
        let mut cx = Ctx::eval(&mut store);
        let parts: Vec<Var> = (0..3).map(|i| cx.input(random(10 + i, 5, 8)).unwrap()).collect();
        let y = rec.fuse(&mut cx, &parts).unwrap();
        for t in 0..5 {
            let cat: Vec<f64> = parts.iter().flat_map(|&p| cx.value(p).row(t).to_vec()).collect();
            for o in 0..8 {
                let want = bias.get(0, o) + cat.iter().enumerate().map(|(i, x)| x * w.get(i, o)).sum::<f64>();
                assert!((cx.value(y).get(t, o) - want).abs() < 1e-12);
            }
        }
        let zeros: Vec<Var> = (0..3).map(|_| cx.input(Tensor::zeros(&[5, 8])).unwrap()).collect();
        let y = rec.fuse(&mut cx, &zeros).unwrap();
        assert!((0..5).all(|t| cx.value(y).row(t) == bias.row(0)));
        let short = cx.input(Tensor::zeros(&[4, 8])).unwrap();
        assert!(rec.fuse(&mut cx, &[parts[0], short, parts[2]]).is_err());
        drop(cx);

        let mut sel = Tensor::zeros(&[24, 8]);
        for i in 0..8 {
            sel.set(i, i, 1.0);
        }
        store.set_value(rec.fuse_proj.w, sel).unwrap();
        store
            .set_value(rec.fuse_proj.b.unwrap(), Tensor::zeros(&[1, 8]))
            .unwrap();
        let mut cx = Ctx::eval(&mut store);
        let parts: Vec<Var> = (0..3).map(|i| cx.input(random(20 + i, 4, 8)).unwrap()).collect();
        let y = rec.fuse(&mut cx, &parts).unwrap();
        assert_eq!(cx.value(y), cx.value(parts[0]));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let target = TokenSeq::from_words(&[0, 4, 2, 7]);
        let mut total = 0.0;
        for seed in 0..5 {
            let mut store = ParamStore::<f64>::new();
            let rec = small(&mut store, seed);
            let mut cx = Ctx::eval(&mut store);
            let x = cx.input(random(seed, 6, 24)).unwrap();
            let x = rec.fuse(&mut cx, &[x]).unwrap();
            let mem = rec.encode(&mut cx, x).unwrap();
            let l = rec.asr_loss(&mut cx, mem, &target).unwrap();
            total += cx.tape.scalar(l);
        }
        assert!((total / 5.0 - 12f64.ln()).abs() < 0.5, "mean loss {}", total / 5.0);
    }

    #[test]
    fn target_limits() {
        let mut store = ParamStore::<f64>::new();
        let rec = small(&mut store, 2);
        let mut cx = Ctx::eval(&mut store);
        let mem = cx.input(random(1, 3, 8)).unwrap();
        let long = TokenSeq::from_words(&[1; 12]);
        assert!(matches!(rec.asr_loss(&mut cx, mem, &long), Err(GilaError::Config(_))));
        assert!(rec.asr_loss(&mut cx, mem, &TokenSeq::default()).is_err());
        assert!(rec.decode_logits(&mut cx, mem, &[SOS, 12]).is_err());
    }

    #[test]
    fn trailing_pads_do_not_change_the_loss() {
        let mut store = ParamStore::<f64>::new();
        let rec = small(&mut store, 3);
        let mut cx = Ctx::eval(&mut store);
        let mem = cx.input(random(2, 4, 8)).unwrap();
        let plain = TokenSeq::from_words(&[3, 1, 5]);
        let mut padded = plain.with_eos();
        padded.ids.extend([PAD, PAD, PAD]);
        let a = rec.asr_loss(&mut cx, mem, &plain).unwrap();
        let b = rec.asr_loss(&mut cx, mem, &padded).unwrap();
        assert!((cx.tape.scalar(a) - cx.tape.scalar(b)).abs() < 1e-12);
    }

    #[test]
    fn eos_rigged_decoder_gives_an_empty_transcript() {
        let mut store = ParamStore::<f64>::new();
        let rec = small(&mut store, 4);
        store.set_value(rec.output_proj.w, Tensor::zeros(&[8, 12])).unwrap();
        let mut bias = Tensor::zeros(&[1, 12]);
        bias.set(0, EOS, 5.0);
        store.set_value(rec.output_proj.b.unwrap(), bias).unwrap();
        let mut cx = Ctx::eval(&mut store);
        let mem = cx.input(random(3, 4, 8)).unwrap();
        assert!(rec.greedy_decode(&mut cx, mem, 8).unwrap().is_empty());
        assert!(rec.beam_decode(&mut cx, mem, 3, 1.0, 8).unwrap().is_empty());
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..6 {
            let mut store = ParamStore::<f64>::new();
            let rec = small(&mut store, seed);
            let mut cx = Ctx::eval(&mut store);
            let mem = cx.input(random(seed + 50, 5, 8)).unwrap();
            let g = rec.greedy_decode(&mut cx, mem, 9).unwrap();
            let b = rec.beam_decode(&mut cx, mem, 1, 1.0, 9).unwrap();
            assert_eq!(g, b);
            assert_eq!(g, rec.greedy_decode(&mut cx, mem, 9).unwrap());
        }
    }

    #[test]
    fn one_sample_is_memorized_in_fifty_steps() {
        let mut store = ParamStore::<f64>::new();
        let rec = small(&mut store, 5);
        let x = random(6, 6, 24);
        let target = TokenSeq::from_words(&[2, 0, 6, 1]);
        let adam = Adam::default();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            store.zero_grads();
            let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
            let xv = cx.input(x.clone()).unwrap();
            let f = rec.fuse(&mut cx, &[xv]).unwrap();
            let mem = rec.encode(&mut cx, f).unwrap();
            let l = rec.asr_loss(&mut cx, mem, &target).unwrap();
            last = cx.tape.scalar(l);
            let g = cx.tape.backward(l).unwrap();
            cx.tape.accumulate_param_grads(&g, cx.store);
            adam.step(&mut store, 1e-2);
        }
        assert!(last < 0.1, "loss after 50 steps {last}");
        let mut cx = Ctx::eval(&mut store);
        let xv = cx.input(x).unwrap();
        let f = rec.fuse(&mut cx, &[xv]).unwrap();
        let mem = rec.encode(&mut cx, f).unwrap();
        assert_eq!(rec.greedy_decode(&mut cx, mem, 9).unwrap().transcript(), target.ids);
    }
}
