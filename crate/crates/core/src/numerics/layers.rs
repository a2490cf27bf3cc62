//! Parameterized building blocks shared by the front-ends, the interaction
//! stack and the recognizer.

use super::{ParamId, ParamStore, Real, RngStream, Tape, Tensor, Var};
use crate::error::{GilaError, Result};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs: the tape it records onto, the weights,
/// the mode, and the dropout stream.
pub struct Ctx<'s, R: Real> {
    pub tape: Tape<R>,
    pub store: &'s mut ParamStore<R>,
    pub mode: Mode,
    pub dropout: f64,
    rng: RngStream,
}

impl<'s, R: Real> Ctx<'s, R> {
    pub fn new(store: &'s mut ParamStore<R>, mode: Mode, dropout: f64, rng: RngStream) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            dropout,
            rng,
        }
    }

    /// Eval-mode context without dropout.
    pub fn eval(store: &'s mut ParamStore<R>) -> Self {
        Self::new(store, Mode::Eval, 0.0, RngStream::new(0, 0))
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        self.tape.value(v)
    }

    pub fn input(&mut self, t: Tensor<R>) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.train() || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = self.tape.value(x).len();
        let scale = R::of(1.0 / keep);
        let mask = (0..n)
            .map(|_| if self.rng.bernoulli(keep) { scale } else { R::zero() })
            .collect();
        self.tape.mask_mul(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w = store.add_xavier(format!("{name}.weight"), d_in, d_out, rng)?;
        let b = if bias {
            Some(store.add_const(format!("{name}.bias"), &[1, d_out], 0.0, true)?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.p(b);
                cx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_const(format!("{name}.gamma"), &[1, d], 1.0, true)?,
            beta: store.add_const(format!("{name}.beta"), &[1, d], 0.0, true)?,
        })
    }

    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Result of an attention call; `weights` holds one `[T_q, T_k]` matrix per
/// head.
#[derive(Debug, Clone)]
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with input and output
/// projections. The key projection has no bias: a key bias shifts every
/// score in a row equally and cancels in the softmax.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(GilaError::config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }

    pub fn forward<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        causal: bool,
    ) -> Result<Attended> {
        let q = self.q.forward(cx, q_in)?;
        let k = self.k.forward(cx, k_in)?;
        let v = self.v.forward(cx, v_in)?;
        let d = cx.tape.shape(q).1;
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    cx.tape.slice_cols(q, h * dh, dh)?,
                    cx.tape.slice_cols(k, h * dh, dh)?,
                    cx.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let a = scaled_dot_product(&mut cx.tape, qh, kh, vh, causal)?;
            outs.push(a.out);
            weights.extend(a.weights);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            cx.tape.concat_cols(&outs)?
        };
        let out = self.o.forward(cx, cat)?;
        Ok(Attended { out, weights })
    }
}

/// `softmax(q kᵀ / √d_k) v` on already-projected inputs.
pub fn scaled_dot_product<R: Real>(tape: &mut Tape<R>, q: Var, k: Var, v: Var, causal: bool) -> Result<Attended> {
    let dk = tape.shape(q).1;
    if tape.shape(k).1 != dk {
        return Err(GilaError::shape(
            "attention",
            tape.value(q).shape(),
            tape.value(k).shape(),
        ));
    }
    let s = tape.matmul_t(q, k, false, true)?;
    let s = tape.scale(s, R::of(1.0 / (dk as f64).sqrt()))?;
    let w = tape.softmax(s, causal)?;
    let out = tape.matmul(w, v)?;
    Ok(Attended { out, weights: vec![w] })
}

/// Single-head attention with learned query/key/value projections, no
/// output projection and no value bias (used inside iterative refinement,
/// where the following batch norm absorbs any constant value shift).
#[derive(Debug, Clone)]
pub struct SingleHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl SingleHeadAttention {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng)?,
        })
    }

    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, q_in: Var, k_in: Var, v_in: Var) -> Result<Attended> {
        let q = self.q.forward(cx, q_in)?;
        let k = self.k.forward(cx, k_in)?;
        let v = self.v.forward(cx, v_in)?;
        scaled_dot_product(&mut cx.tape, q, k, v, false)
    }
}

/// Linear, ReLU, Linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d, d_ff, true, rng)?,
            l2: Linear::new(store, &format!("{name}.fc2"), d_ff, d, true, rng)?,
        })
    }

    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let h = self.l1.forward(cx, x)?;
        let h = cx.tape.relu(h)?;
        self.l2.forward(cx, h)
    }
}

/// 1x1 convolution over time (a per-frame matrix product), batch norm over
/// frames, then a per-channel PReLU.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub w: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub slope: ParamId,
}

impl PointwiseConv {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_xavier(format!("{name}.weight"), d_in, d_out, rng)?,
            bn_gamma: store.add_const(format!("{name}.bn.gamma"), &[1, d_out], 1.0, true)?,
            bn_beta: store.add_const(format!("{name}.bn.beta"), &[1, d_out], 0.0, true)?,
            running_mean: store.add_const(format!("{name}.bn.running_mean"), &[1, d_out], 0.0, false)?,
            running_var: store.add_const(format!("{name}.bn.running_var"), &[1, d_out], 1.0, false)?,
            slope: store.add_const(format!("{name}.prelu"), &[1, d_out], PRELU_INIT, true)?,
        })
    }

    pub fn forward<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        Ok(self.forward_many(cx, &[x])?.remove(0))
    }

    /// Applies the block to several utterances at once. In train mode the
    /// batch statistics are taken over the frames of all of them.
    pub fn forward_many<R: Real>(&self, cx: &mut Ctx<'_, R>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(GilaError::EmptySequence("pointwise_conv_block"));
        }
        let w = cx.p(self.w);
        let mut lens = Vec::with_capacity(xs.len());
        let mut zs = Vec::with_capacity(xs.len());
        for &x in xs {
            let z = cx.tape.matmul(x, w)?;
            lens.push(cx.tape.shape(z).0);
            zs.push(z);
        }
        let z = if zs.len() == 1 {
            zs[0]
        } else {
            cx.tape.concat_rows(&zs)?
        };
        let frames = cx.tape.shape(z).0;
        let zn = if cx.train() && frames > 1 {
            self.update_running_stats(cx, z);
            cx.tape.standardize_cols(z, BN_EPS)?
        } else {
            if cx.train() {
                log::warn!("batch norm over a single frame: falling back to running statistics");
            }
            let rm = cx.store.get(self.running_mean).tensor.map(|m| -m);
            let inv = cx
                .store
                .get(self.running_var)
                .tensor
                .map(|v| R::one() / (v + R::of(BN_EPS)).sqrt());
            let rm = cx.input(rm)?;
            let inv = cx.input(inv)?;
            let centered = cx.tape.add_row(z, rm)?;
            cx.tape.mul_row(centered, inv)?
        };
        let g = cx.p(self.bn_gamma);
        let b = cx.p(self.bn_beta);
        let y = cx.tape.mul_row(zn, g)?;
        let y = cx.tape.add_row(y, b)?;
        let a = cx.p(self.slope);
        let y = cx.tape.prelu(y, a)?;
        if xs.len() == 1 {
            return Ok(vec![y]);
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut off = 0;
        for n in lens {
            out.push(cx.tape.slice_rows(y, off, n)?);
            off += n;
        }
        Ok(out)
    }

    fn update_running_stats<R: Real>(&self, cx: &mut Ctx<'_, R>, z: Var) {
        let v = cx.tape.value(z);
        let (r, c) = (v.rows(), v.cols());
        let n = r as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            mean[j] = (0..r).map(|i| v.get(i, j).as_f64()).sum::<f64>() / n;
            var[j] = (0..r).map(|i| (v.get(i, j).as_f64() - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
        }
        let m = R::of(BN_MOMENTUM);
        for (id, stat) in [(self.running_mean, &mean), (self.running_var, &var)] {
            let p = cx.store.get_mut(id);
            for (x, &s) in p.tensor.data_mut().iter_mut().zip(stat.iter()) {
                *x = (R::one() - m) * *x + m * R::of(s);
            }
        }
    }
}

/// Fixed sinusoidal position table `[t_max, d]`.
pub fn sinusoidal_table<R: Real>(t_max: usize, d: usize) -> Tensor<R> {
    let mut t = Tensor::zeros(&[t_max, d]);
    for pos in 0..t_max {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, R::of(v));
        }
    }
    t
}

/// First `frames` rows of the position table, as a tape constant.
pub fn positions<R: Real>(cx: &mut Ctx<'_, R>, table: &Tensor<R>, frames: usize) -> Result<Var> {
    if frames > table.rows() {
        return Err(GilaError::config(format!(
            "sequence of {frames} frames exceeds the position table ({} rows)",
            table.rows()
        )));
    }
    let idx: Vec<usize> = (0..frames).collect();
    let rows = table.select_rows(&idx)?;
    cx.input(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_mha(store: &mut ParamStore<f64>, d: usize, heads: usize) -> MultiHeadAttention {
        let mha = MultiHeadAttention::new(store, "mha", d, heads, &mut RngStream::new(1, 1)).unwrap();
        for l in [&mha.q, &mha.k, &mha.v, &mha.o] {
            store.set_value(l.w, Tensor::eye(d)).unwrap();
        }
        mha
    }

    /// Scalar-loop single-head attention with identity projections.
    fn loop_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn attention_hand_example() {
        let mut store = ParamStore::new();
        let mha = identity_mha(&mut store, 2, 1);
        let mut cx = Ctx::eval(&mut store);
        let q = cx.input(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let k = cx.input(Tensor::eye(2)).unwrap();
        let v = cx
            .input(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap())
            .unwrap();
        let a = mha.forward(&mut cx, q, k, v, false).unwrap();
        let w = cx.value(a.weights[0]).data().to_vec();
        let oracle = loop_attention(
            &[vec![1.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![2.0, 0.0], vec![0.0, 2.0]],
        );
        let out = cx.value(a.out).data();
        assert!((out[0] - oracle[0][0]).abs() < 1e-15 && (out[1] - oracle[0][1]).abs() < 1e-15);
        assert!((w[0] - 0.6698).abs() < 1e-4 && (w[1] - 0.3302).abs() < 1e-4);
        assert!((out[0] - 1.3396).abs() < 1e-4 && (out[1] - 0.6604).abs() < 1e-4);
    }

    #[test]
    fn single_key_and_uniform_scores() {
        let mut store = ParamStore::new();
        let mha = identity_mha(&mut store, 4, 2);
        let mut cx = Ctx::eval(&mut store);
        let q = cx
            .input(Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0], vec![0.0, 4.0, -1.0, 1.0]]).unwrap())
            .unwrap();
        let one = cx
            .input(Tensor::from_rows(&[vec![0.3, 0.1, -0.7, 2.0]]).unwrap())
            .unwrap();
        let v1 = cx
            .input(Tensor::from_rows(&[vec![5.0, 6.0, 7.0, 8.0]]).unwrap())
            .unwrap();
        let a = mha.forward(&mut cx, q, one, v1, false).unwrap();
        assert_eq!(cx.value(a.out).data(), &[5.0, 6.0, 7.0, 8.0, 5.0, 6.0, 7.0, 8.0]);

        let same = cx.input(Tensor::full(&[3, 4], 0.5)).unwrap();
        let vs = cx
            .input(
                Tensor::from_rows(&[
                    vec![1.0, 0.0, 3.0, 6.0],
                    vec![2.0, 3.0, 0.0, 0.0],
                    vec![3.0, 0.0, 0.0, 3.0],
                ])
                .unwrap(),
            )
            .unwrap();
        let a = mha.forward(&mut cx, q, same, vs, false).unwrap();
        for row in cx.value(a.out).data().chunks(4) {
            for (x, m) in row.iter().zip([2.0, 1.0, 1.0, 3.0]) {
                assert!((x - m).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3, 0);
        let mha = MultiHeadAttention::new(&mut store, "m", 8, 4, &mut rng).unwrap();
        let x: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let mut cx = Ctx::eval(&mut store);
        let x = cx.input(Tensor::new(&[5, 8], x).unwrap()).unwrap();
        for causal in [false, true] {
            let a = mha.forward(&mut cx, x, x, x, causal).unwrap();
            assert_eq!(a.weights.len(), 4);
            for w in &a.weights {
                for row in cx.value(*w).data().chunks(5) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(MultiHeadAttention::new(&mut store, "bad", 6, 4, &mut rng).is_err());
    }

    fn conv(store: &mut ParamStore<f64>, d_in: usize, d_out: usize) -> PointwiseConv {
        PointwiseConv::new(store, "c", d_in, d_out, &mut RngStream::new(5, 5)).unwrap()
    }

    #[test]
    fn identity_conv_block_passes_input_through() {
        let mut store = ParamStore::new();
        let c = conv(&mut store, 3, 3);
        store.set_value(c.w, Tensor::eye(3)).unwrap();
        store.set_value(c.slope, Tensor::full(&[1, 3], 1.0)).unwrap();
        store
            .set_value(c.running_var, Tensor::full(&[1, 3], 1.0 - BN_EPS))
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![-3.0, 4.0, 0.0]]).unwrap();
        let mut cx = Ctx::eval(&mut store);
        let xv = cx.input(x.clone()).unwrap();
        let y = c.forward(&mut cx, xv).unwrap();
        assert!(cx.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn constant_channel_normalizes_to_zero_in_train_mode() {
        let mut store = ParamStore::new();
        let c = conv(&mut store, 2, 2);
        store.set_value(c.w, Tensor::eye(2)).unwrap();
        let x = Tensor::from_rows(&[vec![7.0, 1.0], vec![7.0, 2.0], vec![7.0, 6.0]]).unwrap();
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
        let xv = cx.input(x).unwrap();
        let y = c.forward(&mut cx, xv).unwrap();
        for i in 0..3 {
            assert_eq!(cx.value(y).get(i, 0), 0.0);
        }
    }

    /// conv → batch norm over frames (biased variance) → affine → PReLU.
    fn loop_conv(x: &[Vec<f64>], w: &[Vec<f64>], gamma: &[f64], beta: &[f64], slope: &[f64]) -> Vec<Vec<f64>> {
        let (t, d_out) = (x.len(), w[0].len());
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| {
                (0..d_out)
                    .map(|o| xi.iter().zip(w).map(|(a, wr)| a * wr[o]).sum())
                    .collect()
            })
            .collect();
        let mut y = vec![vec![0.0; d_out]; t];
        for o in 0..d_out {
            let mean = z.iter().map(|r| r[o]).sum::<f64>() / t as f64;
            let var = z.iter().map(|r| (r[o] - mean).powi(2)).sum::<f64>() / t as f64;
            for i in 0..t {
                let h = gamma[o] * (z[i][o] - mean) / (var + BN_EPS).sqrt() + beta[o];
                y[i][o] = if h >= 0.0 { h } else { slope[o] * h };
            }
        }
        y
    }

    #[test]
    fn conv_block_matches_loop_oracle() {
        let mut store = ParamStore::new();
        let c = conv(&mut store, 3, 2);
        let mut rng = RngStream::new(11, 0);
        let x: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let (gamma, beta, slope) = ([1.3, 0.6], [-0.2, 0.4], [0.25, 0.1]);
        store
            .set_value(c.bn_gamma, Tensor::from_rows(&[gamma.to_vec()]).unwrap())
            .unwrap();
        store
            .set_value(c.bn_beta, Tensor::from_rows(&[beta.to_vec()]).unwrap())
            .unwrap();
        store
            .set_value(c.slope, Tensor::from_rows(&[slope.to_vec()]).unwrap())
            .unwrap();
        let wt = store.get(c.w).tensor.clone();
        let w: Vec<Vec<f64>> = (0..3).map(|i| wt.row(i).to_vec()).collect();
        let oracle = loop_conv(&x, &w, &gamma, &beta, &slope);
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
        let xv = cx.input(Tensor::from_rows(&x).unwrap()).unwrap();
        let y = c.forward(&mut cx, xv).unwrap();
        let y = cx.value(y).clone();
        assert!(y.max_abs_diff(&Tensor::from_rows(&oracle).unwrap()) < 1e-12);
        assert!(store.get(c.running_mean).tensor.data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_dropout_is_identity_and_train_dropout_scales() {
        let mut store = ParamStore::<f64>::new();
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.5, RngStream::new(2, 2));
        let x = cx.input(Tensor::full(&[10, 10], 1.0)).unwrap();
        let y = cx.dropout(x).unwrap();
        assert!(cx.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let mut cx = Ctx::new(&mut store, Mode::Eval, 0.5, RngStream::new(2, 2));
        let x = cx.input(Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(cx.dropout(x).unwrap(), x);
    }

    #[test]
    fn batched_conv_uses_statistics_of_all_frames() {
        let mut store = ParamStore::new();
        let c = conv(&mut store, 3, 2);
        let mut rng = RngStream::new(12, 0);
        let x: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let wt = store.get(c.w).tensor.clone();
        let w: Vec<Vec<f64>> = (0..3).map(|i| wt.row(i).to_vec()).collect();
        let oracle = loop_conv(&x, &w, &[1.0, 1.0], &[0.0, 0.0], &[PRELU_INIT, PRELU_INIT]);
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
        let a = cx.input(Tensor::from_rows(&x[..2]).unwrap()).unwrap();
        let b = cx.input(Tensor::from_rows(&x[2..]).unwrap()).unwrap();
        let ys = c.forward_many(&mut cx, &[a, b]).unwrap();
        assert_eq!(cx.value(ys[0]).shape(), &[2, 2]);
        assert_eq!(cx.value(ys[1]).shape(), &[3, 2]);
        assert!(cx.value(ys[0]).max_abs_diff(&Tensor::from_rows(&oracle[..2]).unwrap()) < 1e-12);
        assert!(cx.value(ys[1]).max_abs_diff(&Tensor::from_rows(&oracle[2..]).unwrap()) < 1e-12);

        let mut cx = Ctx::eval(&mut store);
        let a = cx.input(Tensor::from_rows(&x[..2]).unwrap()).unwrap();
        let b = cx.input(Tensor::from_rows(&x[2..]).unwrap()).unwrap();
        let ys = c.forward_many(&mut cx, &[a, b]).unwrap();
        let alone = c.forward(&mut cx, b).unwrap();
        assert_eq!(cx.value(ys[1]), cx.value(alone));
        assert!(c.forward_many(&mut cx, &[]).is_err());
    }
}
