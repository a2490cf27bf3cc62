//! Global interaction stack.
//!
//! Each layer runs per-modality self-attention, audio/visual cross-attention
//! and a feed-forward network (all post-LN residual), then refines the
//! bottleneck feature by letting it attend to each modality output:
//!
//! ```text
//! F_m   = LN(X_m + MHA(X_m, X_m, X_m))
//! H_A   = LN(F_A + MHA(F_A, F_V, F_V))        H_V symmetric
//! X_m'  = LN(H_m + FFN(H_m))
//! R_m   = Conv(Attention(X_BN, X_m', X_m'))
//! X_BN' = LN(X_BN + R_A + R_V)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{GilaError, Result};
use crate::numerics::{
    Ctx, FeedForward, LayerNorm, MultiHeadAttention, ParamStore, PointwiseConv, Real, RngStream, SingleHeadAttention,
    Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Without cross-attention `H_m = F_m`.
    pub use_cross_attn: bool,
    /// Without iterative refinement the bottleneck passes through unchanged
    /// and the residuals are zero.
    pub use_ir: bool,
}

#[derive(Debug, Clone)]
struct Modality {
    self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    cross_attn: Option<(MultiHeadAttention, LayerNorm)>,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
    ir: Option<(SingleHeadAttention, PointwiseConv)>,
}

impl Modality {
    fn new<R: Real>(store: &mut ParamStore<R>, name: &str, cfg: &GiConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.d;
        let cross_attn = if cfg.use_cross_attn {
            Some((
                MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng)?,
                LayerNorm::new(store, &format!("{name}.ln_cross"), d)?,
            ))
        } else {
            None
        };
        let ir = if cfg.use_ir {
            Some((SingleHeadAttention::new(store, &format!("{name}.ir_attn"), d, rng)?, {
                let conv = PointwiseConv::new(store, &format!("{name}.ir_conv"), d, d, rng)?;
                // zero-gamma init of the refinement branch
                store.set_value(conv.bn_gamma, Tensor::zeros(&[1, d]))?;
                conv
            }))
        } else {
            None
        };
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d)?,
            cross_attn,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ir,
        })
    }

    fn self_block<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let a = self.self_attn.forward(cx, x, x, x, false)?.out;
        let a = cx.dropout(a)?;
        let s = cx.tape.add(x, a)?;
        self.ln_self.forward(cx, s)
    }

    fn cross_block<R: Real>(&self, cx: &mut Ctx<'_, R>, own: Var, other: Var) -> Result<Var> {
        match &self.cross_attn {
            Some((mha, ln)) => {
                let a = mha.forward(cx, own, other, other, false)?.out;
                let s = cx.tape.add(own, a)?;
                ln.forward(cx, s)
            }
            None => Ok(own),
        }
    }

    fn ffn_block<R: Real>(&self, cx: &mut Ctx<'_, R>, h: Var) -> Result<Var> {
        let f = self.ffn.forward(cx, h)?;
        let s = cx.tape.add(h, f)?;
        self.ln_ffn.forward(cx, s)
    }
}

/// Intermediates of one layer's attention-fusion block.
#[derive(Debug, Clone, Copy)]
pub struct FusionOut {
    pub f_a: Var,
    pub f_v: Var,
    pub h_a: Var,
    pub h_v: Var,
    pub x_a: Var,
    pub x_v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOut {
    pub r_a: Var,
    pub r_v: Var,
    pub x_bn: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub f_a: Var,
    pub f_v: Var,
    pub h_a: Var,
    pub h_v: Var,
    pub x_a: Var,
    pub x_v: Var,
    pub r_a: Var,
    pub r_v: Var,
    pub x_bn: Var,
}

impl LayerTrace {
    pub fn tensors(&self) -> [Var; 9] {
        [
            self.f_a, self.f_v, self.h_a, self.h_v, self.x_a, self.x_v, self.r_a, self.r_v, self.x_bn,
        ]
    }
}

/// Every intermediate of the stack, for the alignment losses and
/// diagnostics. Layer `i` (1-based) is `layers[i - 1]`.
#[derive(Debug, Clone)]
pub struct ModalTrace {
    pub x_a0: Var,
    pub x_v0: Var,
    pub x_bn0: Var,
    pub layers: Vec<LayerTrace>,
}

impl ModalTrace {
    /// `X_A^j`; `j = 0` is the front-end output.
    pub fn x_a(&self, j: usize) -> Option<Var> {
        if j == 0 {
            Some(self.x_a0)
        } else {
            self.layers.get(j - 1).map(|l| l.x_a)
        }
    }

    pub fn x_v(&self, j: usize) -> Option<Var> {
        if j == 0 {
            Some(self.x_v0)
        } else {
            self.layers.get(j - 1).map(|l| l.x_v)
        }
    }

    pub fn x_bn(&self, j: usize) -> Option<Var> {
        if j == 0 {
            Some(self.x_bn0)
        } else {
            self.layers.get(j - 1).map(|l| l.x_bn)
        }
    }

    pub fn last(&self) -> (Var, Var, Var) {
        let m = self.layers.len();
        (
            self.x_a(m).expect("trace has layers"),
            self.x_v(m).expect("trace has layers"),
            self.x_bn(m).expect("trace has layers"),
        )
    }

    /// Concrete values of every trace tensor in a fixed order.
    pub fn snapshot<R: Real>(&self, cx: &Ctx<'_, R>) -> Vec<Tensor<R>> {
        let mut out = vec![
            cx.value(self.x_a0).clone(),
            cx.value(self.x_v0).clone(),
            cx.value(self.x_bn0).clone(),
        ];
        for l in &self.layers {
            out.extend(l.tensors().iter().map(|&v| cx.value(v).clone()));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GiLayer {
    audio: Modality,
    visual: Modality,
    ln_bn: Option<crate::numerics::LayerNorm>,
}

impl GiLayer {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, cfg: &GiConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            audio: Modality::new(store, &format!("{name}.audio"), cfg, rng)?,
            visual: Modality::new(store, &format!("{name}.visual"), cfg, rng)?,
            ln_bn: if cfg.use_ir {
                Some(LayerNorm::new(store, &format!("{name}.ln_bn"), cfg.d)?)
            } else {
                None
            },
        })
    }

    /// Self-attention, cross-attention and feed-forward for both streams.
    pub fn attention_fusion_block<R: Real>(&self, cx: &mut Ctx<'_, R>, x_a: Var, x_v: Var) -> Result<FusionOut> {
        let (ta, tv) = (cx.tape.shape(x_a).0, cx.tape.shape(x_v).0);
        if ta == 0 || tv == 0 {
            return Err(GilaError::EmptySequence("attention_fusion_block"));
        }
        if ta != tv {
            return Err(GilaError::Sync { audio: ta, video: tv });
        }
        let f_a = self.audio.self_block(cx, x_a)?;
        let f_v = self.visual.self_block(cx, x_v)?;
        let h_a = self.audio.cross_block(cx, f_a, f_v)?;
        let h_v = self.visual.cross_block(cx, f_v, f_a)?;
        let x_a = self.audio.ffn_block(cx, h_a)?;
        let x_v = self.visual.ffn_block(cx, h_v)?;
        Ok(FusionOut {
            f_a,
            f_v,
            h_a,
            h_v,
            x_a,
            x_v,
        })
    }

    /// Bottleneck update from the current layer's modality outputs.
    pub fn iterative_refinement<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        x_bn: Var,
        x_a: Var,
        x_v: Var,
    ) -> Result<RefineOut> {
        Ok(self.iterative_refinement_many(cx, &[(x_bn, x_a, x_v)])?.remove(0))
    }

    /// Refinement of several utterances `(x_bn, x_a, x_v)`; the convolution
    /// batch norm sees the frames of all of them.
    pub fn iterative_refinement_many<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        items: &[(Var, Var, Var)],
    ) -> Result<Vec<RefineOut>> {
        let (Some((attn_a, conv_a)), Some((attn_v, conv_v)), Some(ln)) = (&self.audio.ir, &self.visual.ir, &self.ln_bn)
        else {
            return items
                .iter()
                .map(|&(x_bn, _, _)| {
                    let shape = cx.value(x_bn).shape().to_vec();
                    let r_a = cx.input(Tensor::zeros(&shape))?;
                    let r_v = cx.input(Tensor::zeros(&shape))?;
                    Ok(RefineOut { r_a, r_v, x_bn })
                })
                .collect();
        };
        let mut att_a = Vec::with_capacity(items.len());
        let mut att_v = Vec::with_capacity(items.len());
        for &(x_bn, x_a, x_v) in items {
            att_a.push(attn_a.forward(cx, x_bn, x_a, x_a)?.out);
            att_v.push(attn_v.forward(cx, x_bn, x_v, x_v)?.out);
        }
        let rs_a = conv_a.forward_many(cx, &att_a)?;
        let rs_v = conv_v.forward_many(cx, &att_v)?;
        let mut out = Vec::with_capacity(items.len());
        for ((&(x_bn, _, _), r_a), r_v) in items.iter().zip(rs_a).zip(rs_v) {
            let s = cx.tape.add(x_bn, r_a)?;
            let s = cx.tape.add(s, r_v)?;
            let x_bn = ln.forward(cx, s)?;
            out.push(RefineOut { r_a, r_v, x_bn });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GiStack {
    pub cfg: GiConfig,
    pub layers: Vec<GiLayer>,
}

impl GiStack {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: GiConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(GilaError::config("the interaction stack needs at least one layer"));
        }
        let layers = (1..=cfg.layers)
            .map(|i| GiLayer::new(store, &format!("gi.{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    /// Runs every layer in order; layer `i` refines `X_BN^{i-1}` using its
    /// own outputs `X_A^i`, `X_V^i`.
    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, x_a0: Var, x_v0: Var, x_bn0: Var) -> Result<ModalTrace> {
        Ok(self.forward_many(cx, &[(x_a0, x_v0, x_bn0)])?.remove(0))
    }

    /// The stack applied to a batch of `(X_A⁰, X_V⁰, X_BN⁰)` in lockstep.
    pub fn forward_many<R: Real>(&self, cx: &mut Ctx<'_, R>, inputs: &[(Var, Var, Var)]) -> Result<Vec<ModalTrace>> {
        let mut traces: Vec<ModalTrace> = inputs
            .iter()
            .map(|&(x_a0, x_v0, x_bn0)| ModalTrace {
                x_a0,
                x_v0,
                x_bn0,
                layers: Vec::with_capacity(self.layers.len()),
            })
            .collect();
        let mut state = inputs.to_vec();
        for layer in &self.layers {
            let mut fused = Vec::with_capacity(state.len());
            for &(x_a, x_v, _) in &state {
                fused.push(layer.attention_fusion_block(cx, x_a, x_v)?);
            }
            let items: Vec<(Var, Var, Var)> = state.iter().zip(&fused).map(|(s, f)| (s.2, f.x_a, f.x_v)).collect();
            let refined = layer.iterative_refinement_many(cx, &items)?;
            for (((trace, f), r), st) in traces.iter_mut().zip(fused).zip(refined).zip(state.iter_mut()) {
                trace.layers.push(LayerTrace {
                    f_a: f.f_a,
                    f_v: f.f_v,
                    h_a: f.h_a,
                    h_v: f.h_v,
                    x_a: f.x_a,
                    x_v: f.x_v,
                    r_a: r.r_a,
                    r_v: r.r_v,
                    x_bn: r.x_bn,
                });
                *st = (f.x_a, f.x_v, r.x_bn);
            }
        }
        Ok(traces)
    }
}
