//! Similarity and frame-attention matrices exported as CSV.

use std::fmt::Write as _;

use crate::data::SyntheticSample;
use crate::error::{GilaError, Result};
use crate::numerics::{Ctx, Mode, Real, RngStream, Tensor};

use super::model::GilaModel;

pub type Matrix = Vec<Vec<f64>>;

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
}

fn softmax_rows(m: &mut Matrix) {
    for row in m.iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
}

/// Row-softmaxed `cos(a_i, b_j) / scale`.
pub fn softmaxed_cosines(a: &[Vec<f64>], b: &[Vec<f64>], scale: f64) -> Matrix {
    let mut m: Matrix = a
        .iter()
        .map(|u| b.iter().map(|v| cosine(u, v) / scale).collect())
        .collect();
    softmax_rows(&mut m);
    m
}

fn rows_f64<R: Real>(t: &Tensor<R>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn time_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|x| *x /= rows.len() as f64);
    m
}

/// Utterance-level similarity matrices between time-pooled final-layer
/// streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDump {
    pub ids: Vec<usize>,
    pub av: Matrix,
    pub aa: Matrix,
    pub vv: Matrix,
}

/// `X_A^j` and `X_V^k` values for one utterance in eval mode.
pub fn stream_pair<R: Real>(
    model: &mut GilaModel<R>,
    sample: &SyntheticSample,
    j: usize,
    k: usize,
) -> Result<(Matrix, Matrix)> {
    let net = &model.net;
    let mut cx = Ctx::new(&mut model.store, Mode::Eval, 0.0, RngStream::new(0, 0));
    let enc = net.forward(&mut cx, sample)?;
    let layers = enc.trace.layers.len();
    let (Some(a), Some(v)) = (enc.trace.x_a(j), enc.trace.x_v(k)) else {
        return Err(GilaError::config(format!("pair ({j}, {k}) outside 0..={layers}")));
    };
    Ok((rows_f64(cx.value(a)), rows_f64(cx.value(v))))
}

pub fn dump_similarity<R: Real>(model: &mut GilaModel<R>, samples: &[SyntheticSample]) -> Result<SimilarityDump> {
    if samples.len() < 2 {
        return Err(GilaError::config("similarity dump needs at least two utterances"));
    }
    let m = model.cfg.model.gi_layers;
    let (mut pa, mut pv) = (Vec::new(), Vec::new());
    for s in samples {
        let (a, v) = stream_pair(model, s, m, m)?;
        pa.push(time_mean(&a));
        pv.push(time_mean(&v));
    }
    Ok(SimilarityDump {
        ids: samples.iter().map(|s| s.id).collect(),
        av: softmaxed_cosines(&pa, &pv, 1.0),
        aa: softmaxed_cosines(&pa, &pa, 1.0),
        vv: softmaxed_cosines(&pv, &pv, 1.0),
    })
}

/// `T x T` row-softmaxed `cos(X_A^j[t], X_V^k[s]) / τ`.
pub fn dump_attention<R: Real>(
    model: &mut GilaModel<R>,
    sample: &SyntheticSample,
    j: usize,
    k: usize,
) -> Result<Matrix> {
    let tau = model.cfg.align.tau;
    let (a, v) = stream_pair(model, sample, j, k)?;
    Ok(softmaxed_cosines(&a, &v, tau))
}

/// Mean of the diagonal entries.
pub fn diagonal_mass(m: &Matrix) -> f64 {
    m.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / m.len() as f64
}

/// Mean of the off-diagonal entries.
pub fn off_diagonal_mean(m: &Matrix) -> f64 {
    let n = m.len();
    let total: f64 = m.iter().flatten().sum();
    (total - diagonal_mass(m) * n as f64) / (n * n - n) as f64
}

/// CSV with an optional header row and column of labels.
pub fn matrix_csv(m: &Matrix, labels: Option<&[usize]>) -> String {
    let mut s = String::new();
    if let Some(ids) = labels {
        s.push_str("id");
        for id in ids {
            let _ = write!(s, ",{id}");
        }
        s.push('\n');
    }
    for (i, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        if let Some(ids) = labels {
            let _ = write!(s, "{},", ids[i]);
        }
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
