//! Finite-difference verification of every differentiable operation and of
//! the composite blocks, at tiny dimensions in `f64`.

use crate::align::{cross_layer_loss, within_layer_loss, Codebook, CodebookConfig, Negatives, Targets};
use crate::error::Result;
use crate::frontend::{Frontend, FrontendConfig};
use crate::gi::{GiConfig, GiLayer, GiStack};
use crate::numerics::{
    cosine_matrix, cosine_similarity, finite_diff_grad_check, gumbel_softmax, Ctx, FeedForward, GradCheckReport,
    GumbelNoise, LayerNorm, Linear, Mode, MultiHeadAttention, ParamStore, PointwiseConv, RngStream, Tensor, Var,
    DEFAULT_EPS,
};
use crate::recognizer::{Recognizer, RecognizerConfig, TokenSeq};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Shapes for single ops.
const OT: usize = 4;
const OD: usize = 4;
/// Shapes for composite blocks.
const T: usize = 5;
const D: usize = 8;
/// Scale of the random weights contracting an output to a scalar.
const PROBE_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type CaseFn = fn(u64) -> Result<GradCheckReport>;

fn rng(seed: u64, salt: u64) -> RngStream {
    RngStream::new(seed, 1000 + salt)
}

fn random(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape, 1.0).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

/// Random batch-norm affine parameters, so no check sits on a PReLU kink.
fn generic_bn_affine(store: &mut ParamStore<f64>, rng: &mut RngStream) {
    for p in store.iter_mut().filter(|p| p.trainable && p.name.contains(".bn.")) {
        p.tensor = off_zero(rng, p.tensor.shape());
    }
}

/// `Σ out ⊙ P` for a fixed random probe `P`.
fn probe(cx: &mut Ctx<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = cx.tape.shape(out);
    let p = random(&mut rng(seed, 999), &[r, c], PROBE_SCALE);
    let p = cx.input(p)?;
    let m = cx.tape.mul(out, p)?;
    cx.tape.sum(m)
}

fn check_inputs<F>(seed: u64, inputs: Vec<Tensor<f64>>, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    finite_diff_grad_check(&mut store, &inputs, Mode::Eval, DEFAULT_EPS, |cx, v| {
        let out = f(cx, v)?;
        probe(cx, out, seed)
    })
}

fn op_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s, 0);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[OD, 3], 1.0)],
                |cx, v| cx.tape.matmul(v[0], v[1]),
            )
        }),
        ("matmul_transpose_a", |s| {
            let mut r = rng(s, 1);
            check_inputs(
                s,
                vec![random(&mut r, &[OD, OT], 1.0), random(&mut r, &[OD, 3], 1.0)],
                |cx, v| cx.tape.matmul_t(v[0], v[1], true, false),
            )
        }),
        ("matmul_transpose_b", |s| {
            let mut r = rng(s, 2);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[3, OD], 1.0)],
                |cx, v| cx.tape.matmul_t(v[0], v[1], false, true),
            )
        }),
        ("matmul_transpose_ab", |s| {
            let mut r = rng(s, 3);
            check_inputs(
                s,
                vec![random(&mut r, &[OD, OT], 1.0), random(&mut r, &[3, OD], 1.0)],
                |cx, v| cx.tape.matmul_t(v[0], v[1], true, true),
            )
        }),
        ("add", |s| {
            let mut r = rng(s, 4);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[OT, OD], 1.0)],
                |cx, v| cx.tape.add(v[0], v[1]),
            )
        }),
        ("sub", |s| {
            let mut r = rng(s, 5);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[OT, OD], 1.0)],
                |cx, v| cx.tape.sub(v[0], v[1]),
            )
        }),
        ("mul", |s| {
            let mut r = rng(s, 6);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[OT, OD], 1.0)],
                |cx, v| cx.tape.mul(v[0], v[1]),
            )
        }),
        ("add_row", |s| {
            let mut r = rng(s, 7);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[1, OD], 1.0)],
                |cx, v| cx.tape.add_row(v[0], v[1]),
            )
        }),
        ("mul_row", |s| {
            let mut r = rng(s, 8);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[1, OD], 1.0)],
                |cx, v| cx.tape.mul_row(v[0], v[1]),
            )
        }),
        ("scale", |s| {
            let mut r = rng(s, 9);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| {
                cx.tape.scale(v[0], -1.7)
            })
        }),
        ("relu", |s| {
            let mut r = rng(s, 10);
            check_inputs(s, vec![off_zero(&mut r, &[OT, OD])], |cx, v| cx.tape.relu(v[0]))
        }),
        ("exp", |s| {
            let mut r = rng(s, 11);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| cx.tape.exp(v[0]))
        }),
        ("log", |s| {
            let mut r = rng(s, 12);
            let x = random(&mut r, &[OT, OD], 1.0).map(|x| x.abs() + 0.5);
            check_inputs(s, vec![x], |cx, v| cx.tape.log(v[0]))
        }),
        ("prelu", |s| {
            let mut r = rng(s, 13);
            check_inputs(
                s,
                vec![off_zero(&mut r, &[OT, OD]), random(&mut r, &[1, OD], 0.5)],
                |cx, v| cx.tape.prelu(v[0], v[1]),
            )
        }),
        ("softmax", |s| {
            let mut r = rng(s, 14);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 2.0)], |cx, v| {
                cx.tape.softmax(v[0], false)
            })
        }),
        ("softmax_causal", |s| {
            let mut r = rng(s, 15);
            check_inputs(s, vec![random(&mut r, &[OT, OT], 2.0)], |cx, v| {
                cx.tape.softmax(v[0], true)
            })
        }),
        ("log_softmax", |s| {
            let mut r = rng(s, 16);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 2.0)], |cx, v| {
                cx.tape.log_softmax(v[0])
            })
        }),
        ("layer_norm", |s| {
            let mut r = rng(s, 17);
            let ins = vec![
                random(&mut r, &[OT, OD], 1.0),
                random(&mut r, &[1, OD], 1.0),
                random(&mut r, &[1, OD], 1.0),
            ];
            check_inputs(s, ins, |cx, v| cx.tape.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("standardize_cols", |s| {
            let mut r = rng(s, 18);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| {
                cx.tape.standardize_cols(v[0], 1e-5)
            })
        }),
        ("l2_normalize_rows", |s| {
            let mut r = rng(s, 19);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| {
                cx.tape.l2_normalize_rows(v[0], 1e-8)
            })
        }),
        ("concat_cols", |s| {
            let mut r = rng(s, 20);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, 2], 1.0), random(&mut r, &[OT, OD], 1.0)],
                |cx, v| cx.tape.concat_cols(&[v[0], v[1], v[0]]),
            )
        }),
        ("slice_cols", |s| {
            let mut r = rng(s, 21);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| {
                cx.tape.slice_cols(v[0], 1, 2)
            })
        }),
        ("concat_rows", |s| {
            let mut r = rng(s, 60);
            check_inputs(
                s,
                vec![random(&mut r, &[1, OD], 1.0), random(&mut r, &[OT - 1, OD], 1.0)],
                |cx, v| cx.tape.concat_rows(&[v[0], v[1], v[0]]),
            )
        }),
        ("slice_rows", |s| {
            let mut r = rng(s, 61);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| {
                cx.tape.slice_rows(v[0], 1, 2)
            })
        }),
        ("gather_rows", |s| {
            let mut r = rng(s, 22);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| {
                cx.tape.gather_rows(v[0], &[3, 0, 3, 2])
            })
        }),
        ("sum", |s| {
            let mut r = rng(s, 23);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| cx.tape.sum(v[0]))
        }),
        ("mean", |s| {
            let mut r = rng(s, 24);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], |cx, v| cx.tape.mean(v[0]))
        }),
        ("mask_mul", |s| {
            let mut r = rng(s, 25);
            let mask: Vec<f64> = (0..OT * OD).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], move |cx, v| {
                cx.tape.mask_mul(v[0], mask.clone())
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s, 26);
            check_inputs(s, vec![random(&mut r, &[OT, 4], 2.0)], |cx, v| {
                cx.tape.cross_entropy(v[0], &[Some(1), None, Some(0), Some(3)])
            })
        }),
        ("info_nce", |s| {
            let mut r = rng(s, 27);
            let rows = vec![(vec![0, 1, 2, 3], 0), (vec![1, 3], 1), (vec![], 2), (vec![3, 0, 2], 3)];
            check_inputs(s, vec![random(&mut r, &[OT, OT], 0.3)], move |cx, v| {
                cx.tape.info_nce(v[0], &rows, 0.1)
            })
        }),
        ("cosine_matrix", |s| {
            let mut r = rng(s, 28);
            check_inputs(
                s,
                vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[3, OD], 1.0)],
                |cx, v| cosine_matrix(&mut cx.tape, v[0], v[1]),
            )
        }),
        ("cosine_similarity", |s| {
            let mut r = rng(s, 29);
            check_inputs(
                s,
                vec![random(&mut r, &[1, OD], 1.0), random(&mut r, &[1, OD], 1.0)],
                |cx, v| cosine_similarity(&mut cx.tape, v[0], v[1]),
            )
        }),
        ("gumbel_softmax_soft", |s| {
            let mut r = rng(s, 30);
            let g = random(&mut r, &[OT, OD], 1.0);
            check_inputs(s, vec![random(&mut r, &[OT, OD], 1.0)], move |cx, v| {
                gumbel_softmax(&mut cx.tape, v[0], 0.7, false, GumbelNoise::Fixed(&g))
            })
        }),
        ("linear", |s| {
            let mut r = rng(s, 31);
            let mut store = ParamStore::new();
            let l = Linear::new(&mut store, "l", OD, 3, true, &mut r)?;
            let x = random(&mut r, &[OT, OD], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
                let y = l.forward(cx, v[0])?;
                probe(cx, y, s)
            })
        }),
        ("layer_norm_module", |s| {
            let mut r = rng(s, 32);
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut store, "ln", OD)?;
            let x = random(&mut r, &[OT, OD], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
                let y = ln.forward(cx, v[0])?;
                probe(cx, y, s)
            })
        }),
        ("feed_forward", |s| {
            let mut r = rng(s, 33);
            let mut store = ParamStore::new();
            let ffn = FeedForward::new(&mut store, "ffn", OD, 4, &mut r)?;
            let x = random(&mut r, &[OT, OD], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
                let y = ffn.forward(cx, v[0])?;
                probe(cx, y, s)
            })
        }),
        ("multi_head_attention", |s| {
            let mut r = rng(s, 34);
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "mha", OD, 2, &mut r)?;
            let ins = vec![random(&mut r, &[OT, OD], 1.0), random(&mut r, &[3, OD], 1.0)];
            finite_diff_grad_check(&mut store, &ins, Mode::Eval, DEFAULT_EPS, |cx, v| {
                let y = mha.forward(cx, v[0], v[1], v[1], false)?.out;
                probe(cx, y, s)
            })
        }),
        ("multi_head_attention_causal", |s| {
            let mut r = rng(s, 35);
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "mha", OD, 2, &mut r)?;
            let x = random(&mut r, &[OT, OD], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
                let y = mha.forward(cx, v[0], v[0], v[0], true)?.out;
                probe(cx, y, s)
            })
        }),
        ("pointwise_conv_train", |s| {
            let mut r = rng(s, 36);
            let mut store = ParamStore::new();
            let conv = PointwiseConv::new(&mut store, "conv", 3, OD, &mut r)?;
            let x = random(&mut r, &[OT, 3], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Train, DEFAULT_EPS, |cx, v| {
                let y = conv.forward(cx, v[0])?;
                probe(cx, y, s)
            })
        }),
        ("pointwise_conv_batch", |s| {
            let mut r = rng(s, 62);
            let mut store = ParamStore::new();
            let conv = PointwiseConv::new(&mut store, "conv", 3, OD, &mut r)?;
            let inputs = vec![random(&mut r, &[2, 3], 1.0), random(&mut r, &[OT - 1, 3], 1.0)];
            finite_diff_grad_check(&mut store, &inputs, Mode::Train, DEFAULT_EPS, |cx, v| {
                let ys = conv.forward_many(cx, v)?;
                let y = cx.tape.concat_rows(&ys)?;
                probe(cx, y, s)
            })
        }),
        ("pointwise_conv_eval", |s| {
            let mut r = rng(s, 37);
            let mut store = ParamStore::new();
            let conv = PointwiseConv::new(&mut store, "conv", 3, OD, &mut r)?;
            let x = random(&mut r, &[OT, 3], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
                let y = conv.forward(cx, v[0])?;
                probe(cx, y, s)
            })
        }),
        ("frontend", |s| {
            let mut r = rng(s, 41);
            let mut store = ParamStore::new();
            let cfg = FrontendConfig {
                d_a_raw: 2,
                d_v_raw: 3,
                d: OD,
                stack_factor: 2,
                use_posenc: true,
                max_frames: OT,
            };
            let fe = Frontend::new(&mut store, cfg, &mut r)?;
            let audio = random(&mut r, &[2 * OT - 1, 2], 1.0);
            let video = random(&mut r, &[OT, 3], 1.0);
            finite_diff_grad_check(&mut store, &[], Mode::Train, DEFAULT_EPS, |cx, _| {
                let out = fe.forward(cx, &audio, &video)?;
                let all = cx.tape.concat_cols(&[out.x_a, out.x_v, out.x_bn])?;
                probe(cx, all, s)
            })
        }),
    ]
}

fn tiny_codebook() -> CodebookConfig {
    CodebookConfig {
        groups: 2,
        entries: 4,
        ..CodebookConfig::default()
    }
}

fn gi_config() -> GiConfig {
    GiConfig {
        d: D,
        heads: 2,
        d_ff: 16,
        layers: 1,
        use_cross_attn: true,
        use_ir: true,
    }
}

fn attention_fusion_case(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 100);
    let mut store = ParamStore::new();
    let layer = GiLayer::new(&mut store, "gi", &gi_config(), &mut r)?;
    let ins = vec![random(&mut r, &[T, D], 1.0), random(&mut r, &[T, D], 1.0)];
    finite_diff_grad_check(&mut store, &ins, Mode::Eval, DEFAULT_EPS, |cx, v| {
        let f = layer.attention_fusion_block(cx, v[0], v[1])?;
        let both = cx.tape.concat_cols(&[f.x_a, f.x_v])?;
        probe(cx, both, s)
    })
}

fn iterative_refinement_case(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 101);
    let mut store = ParamStore::new();
    let layer = GiLayer::new(&mut store, "gi", &gi_config(), &mut r)?;
    generic_bn_affine(&mut store, &mut r);
    let ins = vec![
        random(&mut r, &[T, D], 1.0),
        random(&mut r, &[T, D], 1.0),
        random(&mut r, &[T, D], 1.0),
    ];
    finite_diff_grad_check(&mut store, &ins, Mode::Train, DEFAULT_EPS, |cx, v| {
        let out = layer.iterative_refinement(cx, v[0], v[1], v[2])?;
        probe(cx, out.x_bn, s)
    })
}

/// The straight-through estimator is not the derivative of the hard
/// forward value, which is piecewise constant. It is the derivative of
/// `f(hard₀ + soft(θ) - soft(θ₀))`, whose value equals the hard forward
/// at `θ₀`. That surrogate is differenced, and the production gradients
/// must match its analytic gradients.
fn vq_straight_through_case(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 102);
    let mut store = ParamStore::new();
    let cb = Codebook::new(&mut store, "vq", D, &tiny_codebook(), &mut r)?;
    let x = random(&mut r, &[T, D], 1.0);
    let noise_state = rng(s, 103);
    let temperature = 0.8;
    let groups = cb.groups;
    let v = cb.entries_per_group;

    // Gumbel perturbations as drawn by the production path, group by group.
    let mut g = noise_state.clone();
    let noise: Vec<Tensor<f64>> = (0..groups)
        .map(|_| Tensor::new(&[T, v], (0..T * v).map(|_| g.gumbel()).collect()).expect("shape"))
        .collect();

    let grads_of =
        |store: &mut ParamStore<f64>, prod: bool, anchors: &[(Tensor<f64>, Tensor<f64>)]| -> Result<Vec<Vec<f64>>> {
            store.zero_grads();
            let mut cx = Ctx::new(store, Mode::Train, 0.0, RngStream::new(0, 0));
            let xin = cx.tape.leaf(x.clone(), true)?;
            let z = if prod {
                let mut n = noise_state.clone();
                cb.quantize(&mut cx, xin, temperature, Some(&mut n))?.z
            } else {
                surrogate(&mut cx, &cb, xin, temperature, &noise, anchors)?
            };
            let loss = probe(&mut cx, z, s)?;
            let grads = cx.tape.backward(loss)?;
            cx.tape.accumulate_param_grads(&grads, cx.store);
            let mut out = vec![grads.get(xin).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec)];
            out.extend(cx.store.iter().filter(|p| p.trainable).map(|p| p.grad.clone()));
            Ok(out)
        };

    // Anchors: hard one-hot and soft sample at the unperturbed parameters.
    let anchors = {
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
        let xin = cx.tape.constant(x.clone())?;
        let logits = cb.logits(&mut cx, xin)?;
        let mut a = Vec::new();
        for (k, &l) in logits.iter().enumerate() {
            let soft = gumbel_softmax(&mut cx.tape, l, temperature, false, GumbelNoise::Fixed(&noise[k]))?;
            let sv = cx.value(soft).clone();
            let mut hard = Tensor::zeros(sv.shape());
            for i in 0..sv.rows() {
                hard.set(i, crate::numerics::argmax(sv.row(i)), 1.0);
            }
            a.push((hard, sv));
        }
        a
    };

    let prod = grads_of(&mut store, true, &anchors)?;
    let surr = grads_of(&mut store, false, &anchors)?;
    let mut worst = 0.0f64;
    for (a, b) in prod.iter().flatten().zip(surr.iter().flatten()) {
        worst = worst.max(crate::numerics::rel_error(*a, *b));
    }

    let mut report = finite_diff_grad_check(
        &mut store,
        std::slice::from_ref(&x),
        Mode::Train,
        DEFAULT_EPS,
        |cx, v| {
            let z = surrogate(cx, &cb, v[0], temperature, &noise, &anchors)?;
            probe(cx, z, s)
        },
    )?;
    if worst > report.max_rel_error {
        report.max_rel_error = worst;
        report.worst = "straight-through vs surrogate analytic gradient".into();
    }
    Ok(report)
}

fn surrogate(
    cx: &mut Ctx<'_, f64>,
    cb: &Codebook,
    x: Var,
    temperature: f64,
    noise: &[Tensor<f64>],
    anchors: &[(Tensor<f64>, Tensor<f64>)],
) -> Result<Var> {
    let logits = cb.logits(cx, x)?;
    let mut sel = Vec::with_capacity(logits.len());
    for (k, &l) in logits.iter().enumerate() {
        let soft = gumbel_softmax(&mut cx.tape, l, temperature, false, GumbelNoise::Fixed(&noise[k]))?;
        let (hard, soft0) = &anchors[k];
        let shift: Vec<f64> = hard.data().iter().zip(soft0.data()).map(|(h, s)| h - s).collect();
        let shift = cx.input(Tensor::new(hard.shape(), shift)?)?;
        sel.push(cx.tape.add(soft, shift)?);
    }
    cb.assemble(cx, &sel)
}

fn encoder_decoder_case(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 104);
    let mut store = ParamStore::new();
    let cfg = RecognizerConfig {
        d: D,
        heads: 2,
        d_ff: 16,
        enc_layers: 2,
        dec_layers: 2,
        vocab: 8,
        max_target_len: 8,
    };
    let rec = Recognizer::new(&mut store, cfg, 3 * D, &mut r)?;
    let x = random(&mut r, &[T, 3 * D], 1.0);
    let target = TokenSeq::new(vec![3, 5, 4, 7]);
    finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
        let x_mm = rec.fuse_proj.forward(cx, v[0])?;
        let memory = rec.encode(cx, x_mm)?;
        let l = rec.asr_loss(cx, memory, &target)?;
        cx.tape.scale(l, PROBE_SCALE)
    })
}

fn gi_stack_case(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 105);
    let mut store = ParamStore::new();
    let stack = GiStack::new(&mut store, gi_config(), &mut r)?;
    generic_bn_affine(&mut store, &mut r);
    let ins = vec![
        random(&mut r, &[T, D], 1.0),
        random(&mut r, &[T, D], 1.0),
        random(&mut r, &[T, D], 1.0),
    ];
    finite_diff_grad_check(&mut store, &ins, Mode::Eval, DEFAULT_EPS, |cx, v| {
        let trace = stack.forward(cx, v[0], v[1], v[2])?;
        let (a, b, c) = trace.last();
        let all = cx.tape.concat_cols(&[a, b, c])?;
        probe(cx, all, s)
    })
}

/// Alignment losses and whole stacks, checked at the block tolerance.
fn composite_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("within_layer_loss", |s| {
            let mut r = rng(s, 38);
            let ins = vec![random(&mut r, &[T, D], 1.0), random(&mut r, &[T, D], 1.0)];
            let mut store = ParamStore::new();
            finite_diff_grad_check(&mut store, &ins, Mode::Eval, DEFAULT_EPS, |cx, v| {
                let l = within_layer_loss(&mut cx.tape, v[0], v[1], 0.1)?;
                cx.tape.scale(l, PROBE_SCALE)
            })
        }),
        ("cross_layer_loss_raw", |s| {
            let mut r = rng(s, 39);
            let ins = vec![random(&mut r, &[T, D], 1.0), random(&mut r, &[T, D], 1.0)];
            let mut store = ParamStore::new();
            finite_diff_grad_check(&mut store, &ins, Mode::Eval, DEFAULT_EPS, |cx, v| {
                let l = cross_layer_loss(cx, v[0], v[1], &[0, 2, 3, 4], Targets::Raw, Negatives::All, 0.1)?;
                cx.tape.scale(l, PROBE_SCALE)
            })
        }),
        ("codebook_diversity", |s| {
            let mut r = rng(s, 40);
            let mut store = ParamStore::new();
            let cb = Codebook::new(&mut store, "vq", D, &tiny_codebook(), &mut r)?;
            let x = random(&mut r, &[T, D], 1.0);
            finite_diff_grad_check(&mut store, &[x], Mode::Eval, DEFAULT_EPS, |cx, v| {
                let logits = cb.logits(cx, v[0])?;
                let p = cb.diversity_penalty(cx, &logits)?;
                cx.tape.scale(p, PROBE_SCALE)
            })
        }),
        ("gi_stack", gi_stack_case),
    ]
}

fn block_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("attention_fusion_block", attention_fusion_case),
        ("iterative_refinement", iterative_refinement_case),
        ("vq_quantize_straight_through", vq_straight_through_case),
        ("encoder_decoder", encoder_decoder_case),
    ]
}

fn run(name: &str, tolerance: f64, f: CaseFn, seeds: &[u64]) -> Result<GradCase> {
    let mut case = GradCase {
        name: name.into(),
        tolerance,
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for &seed in seeds {
        let r = f(seed)?;
        case.checked += r.checked;
        if r.max_rel_error >= case.max_rel_error {
            case.max_rel_error = r.max_rel_error;
            case.worst = format!("seed {seed}: {}", r.worst);
        }
    }
    Ok(case)
}

/// Every op case at [`OP_TOLERANCE`] and every block or composite case at
/// [`BLOCK_TOLERANCE`], each over all `seeds`.
pub fn run_gradient_suite(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, f) in op_cases() {
        out.push(run(name, OP_TOLERANCE, f, seeds)?);
    }
    for (name, f) in block_cases().into_iter().chain(composite_cases()) {
        out.push(run(name, BLOCK_TOLERANCE, f, seeds)?);
    }
    Ok(out)
}
