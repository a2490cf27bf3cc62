//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the tape in reverse and returns fresh adjoints; nothing on the tape
//! is mutated, so backward may be called any number of times. Persistent
//! accumulation (`+=`) happens only when the caller folds the adjoints into a
//! [`ParamStore`] or another accumulator.

use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{GilaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, R),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Prelu(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    Standardize {
        x: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    L2NormalizeRows {
        x: Var,
        denom: Vec<R>,
        clamped: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MaskMul {
        x: Var,
        mask: Vec<R>,
    },
    StraightThrough(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<R>,
        count: usize,
    },
    InfoNce {
        sim: Var,
        rows: Vec<NceRow<R>>,
        tau: R,
    },
}

#[derive(Debug, Clone)]
struct NceRow<R> {
    candidates: Vec<usize>,
    positive: usize,
    weights: Vec<R>,
}

#[derive(Debug, Clone)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    /// Whether any parameter or grad-requiring leaf feeds this node.
    live: bool,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    adj: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }
}

/// Neumaier summation, so full reductions stay accurate to a few ulps.
fn compensated_sum<R: Real>(xs: &[R]) -> R {
    let (mut s, mut c) = (R::zero(), R::zero());
    for &x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Computation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    param_vars: Vec<Option<Var>>,
}

fn rc<R: Real>(t: &Tensor<R>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        rc(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value.item()
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    fn push(&mut self, name: &'static str, value: Tensor<R>, op: Op<R>, live: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(GilaError::numeric(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node { value, op, live });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input or constant. `requires_grad` leaves receive adjoints.
    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Parameter value, copied onto the tape on first use.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            live: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(GilaError::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            R::one(),
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            R::zero(),
            &mut out,
        );
        let live = self.live(a) || self.live(b);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, live)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(GilaError::shape(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let live = self.live(a) || self.live(b);
        self.push(name, out, op, live)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn rowwise(&mut self, name: &'static str, x: Var, row: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (rr, rcn) = self.shape(row);
        if rr != 1 || rcn != c {
            return Err(GilaError::shape(name, self.value(x).shape(), self.value(row).shape()));
        }
        let vx = self.value(x).data();
        let vr = self.value(row).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(vx[i * c + j], vr[j]));
            }
        }
        let out = Tensor::new(self.value(x).shape(), data)?;
        let live = self.live(x) || self.live(row);
        self.push(name, out, op, live)
    }

    /// Broadcast-add a `[1, c]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.rowwise("add_row", x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// Broadcast-multiply every row of `x` by a `[1, c]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.rowwise("mul_row", x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let live = self.live(x);
        self.push("scale", out, Op::Scale(x, c), live)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > R::zero() { v } else { R::zero() });
        let live = self.live(x);
        self.push("relu", out, Op::Relu(x), live)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        let live = self.live(x);
        self.push("exp", out, Op::Exp(x), live)
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= R::zero()) {
            return Err(GilaError::numeric("log of a non-positive value"));
        }
        let out = self.value(x).map(|v| v.ln());
        let live = self.live(x);
        self.push("log", out, Op::Log(x), live)
    }

    /// `z` where `z >= 0`, `slope[c] * z` otherwise; `slope` is `[1, c]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.rowwise(
            "prelu",
            x,
            slope,
            |z, a| if z >= R::zero() { z } else { a * z },
            Op::Prelu(x, slope),
        )
    }

    /// Row-wise softmax with max subtraction. With `causal`, entry `(i, j)`
    /// for `j > i` is masked to probability zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.shape(x);
        let vx = self.value(x);
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(GilaError::numeric("NaN input to softmax"));
        }
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let lim = if causal { (i + 1).min(c) } else { c };
            let row = &vx.data()[i * c..i * c + lim];
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut s = R::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for o in &mut out[i * c..i * c + lim] {
                *o /= s;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let live = self.live(x);
        self.push("softmax", out, Op::Softmax(x), live)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let vx = self.value(x);
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(GilaError::numeric("NaN input to log_softmax"));
        }
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let lse = log_sum_exp(row.iter().copied());
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let live = self.live(x);
        self.push("log_softmax", out, Op::LogSoftmax(x), live)
    }

    /// Per-row normalization followed by the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(GilaError::shape(
                    "layer_norm",
                    self.value(x).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = R::of(eps);
        let n = R::of(c as f64);
        let mut xhat = vec![R::zero(); r * c];
        let mut inv_std = vec![R::zero(); r];
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let row = &vx[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<R>() / n;
            let is = R::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let live = self.live(x) || self.live(gamma) || self.live(beta);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            live,
        )
    }

    /// Per-column normalization over rows (batch statistics), no affine.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let vx = self.value(x).data();
        let eps = R::of(eps);
        let n = R::of(r as f64);
        let mut xhat = vec![R::zero(); r * c];
        let mut inv_std = vec![R::zero(); c];
        for j in 0..c {
            let mu = (0..r).map(|i| vx[i * c + j]).sum::<R>() / n;
            let var = (0..r).map(|i| (vx[i * c + j] - mu).powi(2)).sum::<R>() / n;
            let is = R::one() / (var + eps).sqrt();
            inv_std[j] = is;
            for i in 0..r {
                xhat[i * c + j] = (vx[i * c + j] - mu) * is;
            }
        }
        let out = Tensor::new(self.value(x).shape(), xhat.clone())?;
        let live = self.live(x);
        self.push("standardize_cols", out, Op::Standardize { x, xhat, inv_std }, live)
    }

    /// Each row divided by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let vx = self.value(x).data();
        let eps = R::of(eps);
        let mut denom = vec![R::zero(); r];
        let mut clamped = vec![false; r];
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let row = &vx[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<R>().sqrt();
            let d = if norm > eps { norm } else { eps };
            clamped[i] = norm <= eps;
            denom[i] = d;
            for j in 0..c {
                out[i * c + j] = row[j] / d;
            }
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let live = self.live(x);
        self.push(
            "l2_normalize_rows",
            out,
            Op::L2NormalizeRows { x, denom, clamped },
            live,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(GilaError::EmptySequence("concat_cols"))?;
        let r = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            if self.shape(p).0 != r {
                return Err(GilaError::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            total += self.shape(p).1;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let live = parts.iter().any(|&p| self.live(p));
        self.push(
            "concat_cols",
            Tensor::new(&[r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            live,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(GilaError::EmptySequence("concat_rows"))?;
        let c = self.shape(first).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(GilaError::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let live = parts.iter().any(|&p| self.live(p));
        let r = out.len() / c;
        self.push(
            "concat_rows",
            Tensor::new(&[r, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            live,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(GilaError::shape("slice_rows", self.value(x).shape(), &[start, len]));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let live = self.live(x);
        self.push(
            "slice_rows",
            Tensor::new(&[len, c], out)?,
            Op::SliceRows { x, start },
            live,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(GilaError::shape("slice_cols", self.value(x).shape(), &[start, len]));
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&vx[i * c + start..i * c + start + len]);
        }
        let live = self.live(x);
        self.push(
            "slice_cols",
            Tensor::new(&[r, len], out)?,
            Op::SliceCols { x, start },
            live,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(GilaError::EmptySequence("gather_rows"));
        }
        let out = self.value(x).select_rows(idx)?;
        let live = self.live(x);
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, live)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = compensated_sum(self.value(x).data());
        let live = self.live(x);
        self.push("sum", Tensor::new(&[1, 1], vec![s])?, Op::Sum(x), live)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = compensated_sum(v.data()) / R::of(v.len() as f64);
        let live = self.live(x);
        self.push("mean", Tensor::new(&[1, 1], vec![s])?, Op::Mean(x), live)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<R>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(GilaError::shape("mask_mul", self.value(x).shape(), &[mask.len()]));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape(), data)?;
        let live = self.live(x);
        self.push("mask_mul", out, Op::MaskMul { x, mask }, live)
    }

    /// Row-wise one-hot of the argmax of `soft`; gradients pass straight
    /// through to `soft`.
    pub fn straight_through_one_hot(&mut self, soft: Var) -> Result<Var> {
        let v = self.value(soft);
        let (r, c) = rc(v);
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            out[i * c + argmax(v.row(i))] = R::one();
        }
        let out = Tensor::new(v.shape(), out)?;
        let live = self.live(soft);
        self.push("straight_through", out, Op::StraightThrough(soft), live)
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(GilaError::shape(
                "cross_entropy",
                self.value(logits).shape(),
                &[targets.len()],
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(GilaError::numeric("cross_entropy: every position is ignored"));
        }
        let vl = self.value(logits).data();
        let mut probs = vec![R::zero(); r * c];
        let mut loss = R::zero();
        for i in 0..r {
            let row = &vl[i * c..(i + 1) * c];
            let lse = log_sum_exp(row.iter().copied());
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if let Some(t) = targets[i] {
                if t >= c {
                    return Err(GilaError::shape("cross_entropy target", &[r, c], &[t]));
                }
                loss += lse - row[t];
            }
        }
        loss /= R::of(count as f64);
        let live = self.live(logits);
        self.push(
            "cross_entropy",
            Tensor::new(&[1, 1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            live,
        )
    }

    /// Summed InfoNCE over the rows of a similarity matrix:
    /// `Σ_t -log( exp(s[t,p_t]/τ) / Σ_{n∈C_t} exp(s[t,n]/τ) )`.
    /// Each `(candidates, positive)` pair must list the positive among the
    /// candidates. Rows with no candidates contribute nothing.
    pub fn info_nce(&mut self, sim: Var, rows: &[(Vec<usize>, usize)], tau: f64) -> Result<Var> {
        let (r, c) = self.shape(sim);
        if rows.len() != r {
            return Err(GilaError::shape("info_nce", self.value(sim).shape(), &[rows.len()]));
        }
        if tau <= 0.0 {
            return Err(GilaError::config("temperature must be positive"));
        }
        let tau = R::of(tau);
        let vs = self.value(sim).data();
        let mut loss = R::zero();
        let mut nce_rows = Vec::with_capacity(r);
        for (t, (cands, pos)) in rows.iter().enumerate() {
            if cands.is_empty() {
                nce_rows.push(NceRow {
                    candidates: vec![],
                    positive: *pos,
                    weights: vec![],
                });
                continue;
            }
            if cands.iter().any(|&n| n >= c) || !cands.contains(pos) {
                return Err(GilaError::config(format!("info_nce: bad candidate set for row {t}")));
            }
            let logits: Vec<R> = cands.iter().map(|&n| vs[t * c + n] / tau).collect();
            let lse = log_sum_exp(logits.iter().copied());
            loss += lse - vs[t * c + pos] / tau;
            let weights = logits.iter().map(|&l| (l - lse).exp()).collect();
            nce_rows.push(NceRow {
                candidates: cands.clone(),
                positive: *pos,
                weights,
            });
        }
        let live = self.live(sim);
        self.push(
            "info_nce",
            Tensor::new(&[1, 1], vec![loss])?,
            Op::InfoNce {
                sim,
                rows: nce_rows,
                tau,
            },
            live,
        )
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(GilaError::shape("backward", self.value(loss).shape(), &[1]));
        }
        let mut adj: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].live {
                self.propagate(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    /// Adds the adjoints of every parameter used on this tape into the
    /// store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients<R>, store: &mut ParamStore<R>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.adj[i].as_ref()) {
                let p = store.get_mut(*id);
                if p.trainable {
                    for (a, &b) in p.grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
    }

    fn acc<'a>(&self, adj: &'a mut [Option<Vec<R>>], v: Var) -> Option<&'a mut Vec<R>> {
        if !self.nodes[v.0].live {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![R::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[R], adj: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let (r, c) = rc(&node.value);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let va = self.value(a).data();
                let vb = self.value(b).data();
                let (m, n) = (r, c);
                let k = if ta { self.shape(a).0 } else { self.shape(a).1 };
                if let Some(da) = self.acc(adj, a) {
                    if ta {
                        R::gemm(k, n, m, R::one(), vb, tb, g, true, R::one(), da);
                    } else {
                        R::gemm(m, n, k, R::one(), g, false, vb, !tb, R::one(), da);
                    }
                }
                if let Some(db) = self.acc(adj, b) {
                    if tb {
                        R::gemm(n, m, k, R::one(), g, true, va, ta, R::one(), db);
                    } else {
                        R::gemm(k, m, n, R::one(), va, !ta, g, false, R::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, R::one()), (*b, R::one())] {
                    if let Some(d) = self.acc(adj, v) {
                        axpy(d, g, s);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, R::one()), (*b, -R::one())] {
                    if let Some(d) = self.acc(adj, v) {
                        axpy(d, g, s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = self.acc(adj, a) {
                    let vb = self.value(b).data();
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.acc(adj, b) {
                    let va = self.value(a).data();
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(dx) = self.acc(adj, *x) {
                    axpy(dx, g, R::one());
                }
                if let Some(dr) = self.acc(adj, *row) {
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (x, row) = (*x, *row);
                if let Some(dx) = self.acc(adj, x) {
                    let vr = self.value(row).data();
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[i * c + j] * vr[j];
                        }
                    }
                }
                if let Some(dr) = self.acc(adj, row) {
                    let vx = self.value(x).data();
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += g[i * c + j] * vx[i * c + j];
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.acc(adj, *x) {
                    axpy(dx, g, *s);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if let Some(dx) = self.acc(adj, x) {
                    let vx = self.value(x).data();
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(vx) {
                        if v > R::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.acc(adj, *x) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gi * y;
                    }
                }
            }
            Op::Log(x) => {
                let x = *x;
                if let Some(dx) = self.acc(adj, x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(self.value(x).data()) {
                        *d += gi / v;
                    }
                }
            }
            Op::Prelu(x, slope) => {
                let (x, slope) = (*x, *slope);
                let vx = self.value(x).data();
                if let Some(dx) = self.acc(adj, x) {
                    let vs = self.value(slope).data();
                    for i in 0..r {
                        for j in 0..c {
                            let z = vx[i * c + j];
                            let k = if z >= R::zero() { R::one() } else { vs[j] };
                            dx[i * c + j] += g[i * c + j] * k;
                        }
                    }
                }
                if let Some(ds) = self.acc(adj, slope) {
                    for i in 0..r {
                        for j in 0..c {
                            let z = vx[i * c + j];
                            if z < R::zero() {
                                ds[j] += g[i * c + j] * z;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.acc(adj, *x) {
                    let y = node.value.data();
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = self.acc(adj, *x) {
                    let y = node.value.data();
                    for i in 0..r {
                        let gs: R = g[i * c..(i + 1) * c].iter().copied().sum();
                        for j in 0..c {
                            dx[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let vg = self.value(gamma).data().to_vec();
                if let Some(dg) = self.acc(adj, gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.acc(adj, beta) {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(adj, x) {
                    let n = R::of(c as f64);
                    let mut dh = vec![R::zero(); c];
                    for i in 0..r {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for j in 0..c {
                            dh[j] = g[i * c + j] * vg[j];
                            s1 += dh[j];
                            s2 += dh[j] * xhat[i * c + j];
                        }
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            dx[i * c + j] += k * (n * dh[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Standardize { x, xhat, inv_std } => {
                if let Some(dx) = self.acc(adj, *x) {
                    let n = R::of(r as f64);
                    for j in 0..c {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for i in 0..r {
                            s1 += g[i * c + j];
                            s2 += g[i * c + j] * xhat[i * c + j];
                        }
                        let k = inv_std[j] / n;
                        for i in 0..r {
                            dx[i * c + j] += k * (n * g[i * c + j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, denom, clamped } => {
                if let Some(dx) = self.acc(adj, *x) {
                    let y = node.value.data();
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: R = if clamped[i] {
                            R::zero()
                        } else {
                            yr.iter().zip(gr).map(|(&a, &b)| a * b).sum()
                        };
                        for j in 0..c {
                            dx[i * c + j] += (gr[j] - yr[j] * dot) / denom[i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(dp) = self.acc(adj, p) {
                        for i in 0..r {
                            for j in 0..pc {
                                dp[i * pc + j] += g[i * c + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = self.acc(adj, p) {
                        axpy(dp, &g[off..off + n], R::one());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let off = *start * c;
                if let Some(dx) = self.acc(adj, *x) {
                    for (d, &gv) in dx[off..off + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let xc = self.shape(x).1;
                if let Some(dx) = self.acc(adj, x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * xc + start + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(dx) = self.acc(adj, *x) {
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(adj, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.acc(adj, *x) {
                    let s = g[0] / R::of(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                if let Some(dx) = self.acc(adj, *x) {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::StraightThrough(soft) => {
                if let Some(ds) = self.acc(adj, *soft) {
                    axpy(ds, g, R::one());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(dl) = self.acc(adj, *logits) {
                    let lc = self.shape(*logits).1;
                    let s = g[0] / R::of(*count as f64);
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..lc {
                            dl[i * lc + j] += s * probs[i * lc + j];
                        }
                        dl[i * lc + t] -= s;
                    }
                }
            }
            Op::InfoNce { sim, rows, tau } => {
                if let Some(ds) = self.acc(adj, *sim) {
                    let sc = self.shape(*sim).1;
                    let s = g[0] / *tau;
                    for (t, row) in rows.iter().enumerate() {
                        for (&n, &w) in row.candidates.iter().zip(&row.weights) {
                            ds[t * sc + n] += s * w;
                        }
                        if !row.candidates.is_empty() {
                            ds[t * sc + row.positive] -= s;
                        }
                    }
                }
            }
        }
    }
}

fn axpy<R: Real>(dst: &mut [R], src: &[R], s: R) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

pub(crate) fn log_sum_exp<R: Real>(xs: impl Iterator<Item = R> + Clone) -> R {
    let m = xs.clone().fold(R::neg_infinity(), R::max);
    if m == R::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<R>().ln()
}

/// Index of the first maximum.
pub fn argmax<R: Real>(xs: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2)).unwrap();
        let b = tape.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = tape.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let any = tape.constant(t(&[&[1.5, -2.0], &[7.0, 0.25], &[-3.0, 9.0]])).unwrap();
        let y = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let err = tape.matmul(z, a).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_transposed_products() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]), true).unwrap();
        let b = tape.leaf(t(&[&[5.0, 6.0], &[7.0, 8.0]]), true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum(c).unwrap();
        let g = tape.backward(l).unwrap();
        // dC = ones: dA = 1·Bᵀ row sums of B, dB = Aᵀ·1 column sums of A.
        assert_eq!(g.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(t(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 0.0]]))
            .unwrap();
        let y = tape.softmax(x, false).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!(close(&v[2..4], &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        assert!((v[4] - 1.0).abs() < 1e-15 && v[5] < 1e-300);
    }

    #[test]
    fn causal_softmax_masks_the_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(t(&[&[1.0, 5.0, 9.0], &[0.0, 0.0, 7.0], &[1.0, 1.0, 1.0]]))
            .unwrap();
        let y = tape.softmax(x, true).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert!(close(&v[6..], &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[1, 3], 1.0)).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let x = tape.constant(t(&[&[1.0, 1.0, 1.0]])).unwrap();
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let g2 = tape.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let b2 = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let x = tape.constant(t(&[&[1.0, -1.0]])).unwrap();
        let y = tape.layer_norm(x, g2, b2, 1e-5).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(tape.value(y).data(), &[s, -s], 1e-15));

        let g0 = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let b5 = tape.constant(Tensor::full(&[1, 2], 5.0)).unwrap();
        let x = tape.constant(t(&[&[3.0, -8.0], &[0.5, 2.0]])).unwrap();
        let y = tape.layer_norm(x, g0, b5, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0; 4]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let l = tape.cross_entropy(u, &[Some(2)]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-15);

        let sat = tape.constant(t(&[&[0.0, 1e4, 0.0]])).unwrap();
        let l = tape.cross_entropy(sat, &[Some(1)]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);

        // Row 0: -log(e^1/(e^1+e^0)); row 1: -log(e^0/(e^0+e^2)); row 2 ignored.
        let x = tape.constant(t(&[&[1.0, 0.0], &[0.0, 2.0], &[9.0, -9.0]])).unwrap();
        let l = tape.cross_entropy(x, &[Some(0), Some(0), None]).unwrap();
        let e = std::f64::consts::E;
        let hand = (-(e / (e + 1.0)).ln() - (1.0 / (1.0 + e * e)).ln()) / 2.0;
        assert!((tape.scalar(l) - hand).abs() < 1e-15);

        assert!(tape.cross_entropy(x, &[None, None, None]).is_err());
        assert!(tape.cross_entropy(x, &[Some(2), None, None]).is_err());
    }

    #[test]
    fn info_nce_hand_case() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(t(&[&[0.5, 0.1], &[0.2, 0.9]])).unwrap();
        let l = tape.info_nce(s, &[(vec![0, 1], 0), (vec![1], 1)], 0.5).unwrap();
        let hand = -((1.0f64).exp() / (1.0f64.exp() + 0.2f64.exp())).ln();
        assert!((tape.scalar(l) - hand).abs() < 1e-15);
        assert!(tape.info_nce(s, &[(vec![1], 0), (vec![1], 1)], 0.5).is_err());
        assert!(tape.info_nce(s, &[(vec![0], 0), (vec![1], 1)], 0.0).is_err());
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[800.0]])).unwrap();
        assert!(tape.exp(x).unwrap_err().to_string().contains("non-finite"));
        let z = tape.constant(t(&[&[0.0]])).unwrap();
        assert!(tape.log(z).is_err());
    }

    #[test]
    fn accumulating_twice_doubles_gradients_exactly() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[&[0.3, -1.2], &[2.0, 0.7]]), true).unwrap();
        let x = t(&[&[1.0, 2.0], &[-0.5, 0.25]]);
        let run = |store: &mut ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let w = tape.param(store, id);
            let xv = tape.constant(x.clone()).unwrap();
            let y = tape.matmul(xv, w).unwrap();
            let y = tape.exp(y).unwrap();
            let l = tape.sum(y).unwrap();
            let g = tape.backward(l).unwrap();
            tape.accumulate_param_grads(&g, store);
        };
        run(&mut store);
        let once: Vec<f64> = store.get(id).grad.clone();
        run(&mut store);
        let p: &Parameter<f64> = store.get(id);
        for (a, b) in p.grad.iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[&[1.0, 2.0]])).unwrap();
        let x = tape.leaf(t(&[&[3.0, 4.0]]), true).unwrap();
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(&xs), 2.0);
    }

    #[test]
    fn row_concat_and_slice_round_trip() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), true).unwrap();
        let b = t
            .leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(), true)
            .unwrap();
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t.slice_rows(c, 1, 2).unwrap();
        assert_eq!(t.value(s), t.value(b));
        assert!(t.slice_rows(c, 2, 2).is_err());
        let wide = t.leaf(Tensor::zeros(&[1, 3]), true).unwrap();
        assert!(t.concat_rows(&[a, wide]).is_err());

        let w = t
            .constant(Tensor::from_rows(&[vec![1.0, 10.0], vec![100.0, 1000.0]]).unwrap())
            .unwrap();
        let prod = t.mul(s, w).unwrap();
        let loss = t.sum(prod).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 10.0, 100.0, 1000.0]);
        assert_eq!(g.get(c).unwrap(), &[0.0, 0.0, 1.0, 10.0, 100.0, 1000.0]);
    }
}
