use crate::align::{AlignConfig, Codebooks};
use crate::data::SyntheticSample;
use crate::error::Result;
use crate::frontend::{Frontend, FrontendConfig};
use crate::gi::{GiConfig, GiStack, ModalTrace};
use crate::numerics::{Ctx, Mode, ParamStore, Purpose, Real, RngStream, Tensor, Var};
use crate::recognizer::{Recognizer, RecognizerConfig, TokenSeq, FIRST_WORD};

use super::config::RunConfig;

/// Module structure of a model; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct Network {
    pub frontend: Frontend,
    pub gi: GiStack,
    pub codebooks: Option<Codebooks>,
    pub recognizer: Recognizer,
    /// Alignment settings with ablated terms zeroed.
    pub align: AlignConfig,
}

/// Intermediates of one utterance's forward pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub trace: ModalTrace,
    pub x_mm: Var,
    pub memory: Var,
}

impl Network {
    pub fn build<R: Real>(cfg: &RunConfig, store: &mut ParamStore<R>) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut rng = RngStream::derive(cfg.seed, Purpose::Init, &[]);
        let frontend = Frontend::new(
            store,
            FrontendConfig {
                d_a_raw: cfg.corpus.d_a_raw,
                d_v_raw: cfg.corpus.d_v_raw,
                d: m.d,
                stack_factor: cfg.corpus.stack_factor,
                use_posenc: cfg.ablation.use_posenc,
                max_frames: cfg.corpus.max_frames(),
            },
            &mut rng,
        )?;
        let gi = GiStack::new(
            store,
            GiConfig {
                d: m.d,
                heads: m.heads,
                d_ff: m.d_ff,
                layers: m.gi_layers,
                use_cross_attn: cfg.ablation.use_gi_cross_attn,
                use_ir: cfg.ablation.use_ir,
            },
            &mut rng,
        )?;
        let align = cfg.effective_align();
        let codebooks = if align.uses_codebooks() {
            Some(Codebooks::new(store, m.d, &align.codebook, &mut rng)?)
        } else {
            None
        };
        let recognizer = Recognizer::new(
            store,
            RecognizerConfig {
                d: m.d,
                heads: m.heads,
                d_ff: m.d_ff,
                enc_layers: m.enc_layers,
                dec_layers: m.dec_layers,
                vocab: cfg.corpus.vocab_size + FIRST_WORD,
                max_target_len: m.max_target_len,
            },
            3 * m.d,
            &mut rng,
        )?;
        Ok(Self {
            frontend,
            gi,
            codebooks,
            recognizer,
            align,
        })
    }

    /// Front-end, interaction stack, fusion of `(X_A^M, X_V^M, X_BN^M)`
    /// and the recognition encoder.
    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, sample: &SyntheticSample) -> Result<Encoded> {
        Ok(self.forward_many(cx, &[sample])?.remove(0))
    }

    /// Forward pass of a batch. Utterances only interact through the batch
    /// statistics of the train-mode batch norms.
    pub fn forward_many<R: Real>(&self, cx: &mut Ctx<'_, R>, samples: &[&SyntheticSample]) -> Result<Vec<Encoded>> {
        let raw: Vec<(Tensor<R>, Tensor<R>)> = samples.iter().map(|s| (s.audio.cast(), s.video.cast())).collect();
        let pairs: Vec<(&Tensor<R>, &Tensor<R>)> = raw.iter().map(|(a, v)| (a, v)).collect();
        let fe = self.frontend.forward_many(cx, &pairs)?;
        let inputs: Vec<(Var, Var, Var)> = fe.iter().map(|f| (f.x_a, f.x_v, f.x_bn)).collect();
        let traces = self.gi.forward_many(cx, &inputs)?;
        let mut out = Vec::with_capacity(traces.len());
        for trace in traces {
            let (x_a, x_v, x_bn) = trace.last();
            let x_mm = self.recognizer.fuse(cx, &[x_a, x_v, x_bn])?;
            let memory = self.recognizer.encode(cx, x_mm)?;
            out.push(Encoded { trace, x_mm, memory });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GilaModel<R: Real> {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore<R>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<R: Real> GilaModel<R> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(&cfg, &mut store)?;
        Ok(Self {
            cfg,
            net,
            store,
            step: 0,
        })
    }

    pub fn eval_ctx(&mut self) -> Ctx<'_, R> {
        Ctx::new(&mut self.store, Mode::Eval, 0.0, RngStream::new(0, 0))
    }

    /// Eval-mode transcript using the configured beam width.
    pub fn decode(&mut self, sample: &SyntheticSample) -> Result<TokenSeq> {
        let (width, penalty) = (self.cfg.beam_width, self.cfg.length_penalty);
        let max_len = self.cfg.model.max_target_len - 1;
        let net = &self.net;
        let mut cx = Ctx::new(&mut self.store, Mode::Eval, 0.0, RngStream::new(0, 0));
        let enc = net.forward(&mut cx, sample)?;
        if width == 1 {
            net.recognizer.greedy_decode(&mut cx, enc.memory, max_len)
        } else {
            net.recognizer.beam_decode(&mut cx, enc.memory, width, penalty, max_len)
        }
    }

    /// Eval-mode values of every trace tensor, in `ModalTrace::snapshot`
    /// order.
    pub fn trace_values(&mut self, sample: &SyntheticSample) -> Result<Vec<Tensor<R>>> {
        let net = &self.net;
        let mut cx = Ctx::new(&mut self.store, Mode::Eval, 0.0, RngStream::new(0, 0));
        let enc = net.forward(&mut cx, sample)?;
        Ok(enc.trace.snapshot(&cx))
    }
}
