use crate::align::{local_alignment_loss, AlignConfig, AlignRng};
use crate::data::{Flow, SyntheticSample};
use crate::error::{GilaError, Result};
use crate::numerics::{Ctx, Purpose, Real, RngStream, Var};

use super::model::{Encoded, Network};

/// Streams consumed by the alignment losses of one sample.
#[derive(Debug, Clone)]
pub struct LossRng {
    pub spans: RngStream,
    pub negatives: RngStream,
    pub gumbel: RngStream,
}

impl LossRng {
    pub fn derive(seed: u64, keys: &[u64]) -> Self {
        Self {
            spans: RngStream::derive(seed, Purpose::Spans, keys),
            negatives: RngStream::derive(seed, Purpose::Negatives, keys),
            gumbel: RngStream::derive(seed, Purpose::Gumbel, keys),
        }
    }
}

/// Unweighted loss terms, flow-weighted, in the declared column order of
/// the alignment config. Disabled terms are 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Breakdown {
    pub asr: f64,
    pub wl: Vec<f64>,
    pub cl: Vec<f64>,
    /// Already weighted by the diversity weight.
    pub diversity: f64,
    pub total: f64,
}

impl Breakdown {
    pub fn zeros(align: &AlignConfig) -> Self {
        Self {
            wl: vec![0.0; align.within.len()],
            cl: vec![0.0; align.cross.len()],
            ..Self::default()
        }
    }

    /// `asr + Σ λ_WL·wl + Σ λ_CL·cl + diversity` under `align`'s weights.
    pub fn weighted_total(&self, align: &AlignConfig) -> f64 {
        let wl: f64 = self.wl.iter().zip(&align.within).map(|(v, t)| v * t.weight).sum();
        let cl: f64 = self.cl.iter().zip(&align.cross).map(|(v, p)| v * p.weight).sum();
        self.asr + wl + cl + self.diversity
    }

    pub fn add_scaled(&mut self, other: &Breakdown, w: f64) {
        self.asr += w * other.asr;
        for (a, b) in self.wl.iter_mut().zip(&other.wl) {
            *a += w * b;
        }
        for (a, b) in self.cl.iter_mut().zip(&other.cl) {
            *a += w * b;
        }
        self.diversity += w * other.diversity;
        self.total += w * other.total;
    }
}

/// `[1]` for a single flow, `[λ_C, 1 - λ_C]` for a clean/noisy pair.
pub fn flow_weights(flows: &[Flow], lambda_c: f64) -> Result<Vec<f64>> {
    match flows {
        [_] => Ok(vec![1.0]),
        [a, b] if a.clean && !b.clean => Ok(vec![lambda_c, 1.0 - lambda_c]),
        _ => Err(GilaError::config("expected one flow or a clean/noisy pair")),
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GilaError::numeric(format!("non-finite {name} loss: {v}")))
    }
}

fn forward_error(e: GilaError) -> GilaError {
    match e {
        GilaError::Numeric(m) => GilaError::numeric(format!("forward pass: {m}")),
        other => other,
    }
}

/// `L_GILA = L_ASR + L_LA` for one flow.
pub fn flow_loss<R: Real>(
    net: &Network,
    cx: &mut Ctx<'_, R>,
    flow: &Flow,
    temperature: f64,
    rng: &mut LossRng,
) -> Result<(Var, Breakdown)> {
    let enc = net.forward(cx, &flow.sample).map_err(forward_error)?;
    encoded_flow_loss(net, cx, flow, &enc, temperature, rng)
}

fn encoded_flow_loss<R: Real>(
    net: &Network,
    cx: &mut Ctx<'_, R>,
    flow: &Flow,
    enc: &Encoded,
    temperature: f64,
    rng: &mut LossRng,
) -> Result<(Var, Breakdown)> {
    let ctx = |term: &'static str| move |e: GilaError| GilaError::numeric(format!("{term}: {e}"));
    let asr = net
        .recognizer
        .asr_loss(cx, enc.memory, &flow.sample.tokens())
        .map_err(ctx("L_ASR"))?;
    let la = local_alignment_loss(
        cx,
        &enc.trace,
        &net.align,
        net.codebooks.as_ref(),
        temperature,
        AlignRng {
            spans: &mut rng.spans,
            negatives: &mut rng.negatives,
            gumbel: &mut rng.gumbel,
        },
    )
    .map_err(ctx("L_LA"))?;
    let total = cx.tape.add(asr, la.total)?;

    let mut b = Breakdown::zeros(&net.align);
    b.asr = finite("L_ASR", cx.tape.scalar(asr).as_f64())?;
    for (layer, v) in &la.within {
        let pos = net
            .align
            .within
            .iter()
            .position(|w| w.layer == *layer && w.weight > 0.0);
        if let Some(i) = pos {
            b.wl[i] = finite(&format!("L_WL^{layer}"), cx.tape.scalar(*v).as_f64())?;
        }
    }
    for ((j, k), v) in &la.cross {
        let pos = net
            .align
            .cross
            .iter()
            .position(|p| p.j == *j && p.k == *k && p.weight > 0.0);
        if let Some(i) = pos {
            b.cl[i] = finite(&format!("L_CL^{j},{k}"), cx.tape.scalar(*v).as_f64())?;
        }
    }
    if let Some(d) = la.diversity {
        b.diversity = finite("diversity", cx.tape.scalar(d).as_f64())?;
    }
    b.total = finite("total", cx.tape.scalar(total).as_f64())?;
    Ok((total, b))
}

/// `Σ_f w_f · L_GILA(f)`: the plain flow loss, or
/// `λ_C·L^C + (1 - λ_C)·L^N` for a clean/noisy pair.
pub fn total_loss<R: Real>(
    net: &Network,
    cx: &mut Ctx<'_, R>,
    flows: &[Flow],
    lambda_c: f64,
    temperature: f64,
    rng: &mut LossRng,
) -> Result<(Var, Breakdown)> {
    batch_loss(
        net,
        cx,
        &[flows.to_vec()],
        lambda_c,
        temperature,
        std::slice::from_mut(rng),
    )
}

/// Mean of [`total_loss`] over a batch of samples (each one or two flows),
/// with a single forward pass so batch norm sees every utterance. `rngs`
/// holds one stream set per sample.
pub fn batch_loss<R: Real>(
    net: &Network,
    cx: &mut Ctx<'_, R>,
    batch: &[Vec<Flow>],
    lambda_c: f64,
    temperature: f64,
    rngs: &mut [LossRng],
) -> Result<(Var, Breakdown)> {
    if batch.is_empty() || rngs.len() != batch.len() {
        return Err(GilaError::config("batch loss needs one stream set per sample"));
    }
    let mut weighted = Vec::new();
    for (i, flows) in batch.iter().enumerate() {
        let weights = flow_weights(flows, lambda_c)?;
        if weights.iter().all(|&w| w == 0.0) {
            return Err(GilaError::config("every flow has zero weight"));
        }
        for (flow, w) in flows.iter().zip(weights) {
            if w != 0.0 {
                weighted.push((i, flow, w));
            }
        }
    }
    let samples: Vec<&SyntheticSample> = weighted.iter().map(|x| &x.1.sample).collect();
    let encs = net.forward_many(cx, &samples).map_err(forward_error)?;

    let inv_b = 1.0 / batch.len() as f64;
    let mut acc: Option<Var> = None;
    let mut mean = Breakdown::zeros(&net.align);
    for (&(i, flow, w), enc) in weighted.iter().zip(&encs) {
        let (l, b) = encoded_flow_loss(net, cx, flow, enc, temperature, &mut rngs[i])?;
        let w = w * inv_b;
        mean.add_scaled(&b, w);
        let l = if w == 1.0 { l } else { cx.tape.scale(l, R::of(w))? };
        acc = Some(match acc {
            Some(a) => cx.tape.add(a, l)?,
            None => l,
        });
    }
    let total = acc.ok_or_else(|| GilaError::config("every flow has zero weight"))?;
    Ok((total, mean))
}
