//! Modality front-ends: audio frame stacking, linear audio embedding with
//! layer norm, pointwise visual embedding, and the initial bottleneck
//! feature built from both.

use serde::{Deserialize, Serialize};

use crate::error::{GilaError, Result};
use crate::numerics::{
    positions, sinusoidal_table, Ctx, LayerNorm, Linear, ParamStore, PointwiseConv, Real, RngStream, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub d_a_raw: usize,
    pub d_v_raw: usize,
    pub d: usize,
    pub stack_factor: usize,
    pub use_posenc: bool,
    pub max_frames: usize,
}

/// Concatenates each run of `factor` consecutive rows into one row; a short
/// final run is zero-padded.
pub fn stack_audio_frames<R: Real>(audio: &Tensor<R>, factor: usize) -> Result<Tensor<R>> {
    if factor == 0 {
        return Err(GilaError::config("stack factor must be positive"));
    }
    let (t, c) = (audio.rows(), audio.cols());
    let out_t = t.div_ceil(factor);
    let mut data = vec![R::zero(); out_t * factor * c];
    data[..t * c].copy_from_slice(audio.data());
    Tensor::new(&[out_t, factor * c], data)
}

/// Embedded modality streams, all `[T, d]`.
#[derive(Debug, Clone, Copy)]
pub struct FrontendOut {
    pub x_a: Var,
    pub x_v: Var,
    pub x_bn: Var,
}

#[derive(Debug, Clone)]
pub struct Frontend {
    pub cfg: FrontendConfig,
    pub audio_proj: Linear,
    pub audio_ln: LayerNorm,
    pub visual: PointwiseConv,
    pub bottleneck: Linear,
    posenc: Tensor<f64>,
}

impl Frontend {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: FrontendConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            audio_proj: Linear::new(
                store,
                "frontend.audio_proj",
                cfg.d_a_raw * cfg.stack_factor,
                d,
                true,
                rng,
            )?,
            audio_ln: LayerNorm::new(store, "frontend.audio_ln", d)?,
            visual: PointwiseConv::new(store, "frontend.visual", cfg.d_v_raw, d, rng)?,
            bottleneck: Linear::new(store, "frontend.bottleneck", 2 * d, d, true, rng)?,
            posenc: sinusoidal_table(cfg.max_frames, d),
            cfg,
        })
    }

    fn add_positions<R: Real>(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        if !self.cfg.use_posenc {
            return Ok(x);
        }
        let frames = cx.tape.shape(x).0;
        let table = self.posenc.cast::<R>();
        let p = positions(cx, &table, frames)?;
        cx.tape.add(x, p)
    }

    /// `X_A⁰ = posenc + LN(stack(a) W + b)`. When `frames` is given the
    /// stacked length must match it.
    pub fn audio<R: Real>(&self, cx: &mut Ctx<'_, R>, audio_raw: &Tensor<R>, frames: Option<usize>) -> Result<Var> {
        if audio_raw.cols() != self.cfg.d_a_raw {
            return Err(GilaError::shape(
                "audio_frontend",
                audio_raw.shape(),
                &[self.cfg.d_a_raw],
            ));
        }
        let stacked = stack_audio_frames(audio_raw, self.cfg.stack_factor)?;
        if let Some(t) = frames {
            if stacked.rows() != t {
                return Err(GilaError::Sync {
                    audio: stacked.rows(),
                    video: t,
                });
            }
        }
        let x = cx.input(stacked)?;
        let h = self.audio_proj.forward(cx, x)?;
        let h = self.audio_ln.forward(cx, h)?;
        self.add_positions(cx, h)
    }

    /// `X_V⁰ = posenc + PReLU(BN(v W))`.
    pub fn visual<R: Real>(&self, cx: &mut Ctx<'_, R>, video_raw: &Tensor<R>) -> Result<Var> {
        Ok(self.visual_many(cx, &[video_raw])?.remove(0))
    }

    /// Visual embedding of several utterances with shared batch statistics.
    pub fn visual_many<R: Real>(&self, cx: &mut Ctx<'_, R>, videos: &[&Tensor<R>]) -> Result<Vec<Var>> {
        let mut xs = Vec::with_capacity(videos.len());
        for v in videos {
            if v.cols() != self.cfg.d_v_raw {
                return Err(GilaError::shape("visual_frontend", v.shape(), &[self.cfg.d_v_raw]));
            }
            xs.push(cx.input((*v).clone())?);
        }
        let hs = self.visual.forward_many(cx, &xs)?;
        hs.into_iter().map(|h| self.add_positions(cx, h)).collect()
    }

    /// `X_BN⁰ = [X_A⁰ ; X_V⁰] W_b + b`.
    pub fn bottleneck<R: Real>(&self, cx: &mut Ctx<'_, R>, x_a: Var, x_v: Var) -> Result<Var> {
        let (ta, tv) = (cx.tape.shape(x_a).0, cx.tape.shape(x_v).0);
        if ta != tv {
            return Err(GilaError::Sync { audio: ta, video: tv });
        }
        let cat = cx.tape.concat_cols(&[x_a, x_v])?;
        self.bottleneck.forward(cx, cat)
    }

    pub fn forward<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        audio_raw: &Tensor<R>,
        video_raw: &Tensor<R>,
    ) -> Result<FrontendOut> {
        Ok(self.forward_many(cx, &[(audio_raw, video_raw)])?.remove(0))
    }

    /// Front-end for a batch of `(audio, video)` pairs.
    pub fn forward_many<R: Real>(
        &self,
        cx: &mut Ctx<'_, R>,
        pairs: &[(&Tensor<R>, &Tensor<R>)],
    ) -> Result<Vec<FrontendOut>> {
        let videos: Vec<&Tensor<R>> = pairs.iter().map(|p| p.1).collect();
        let xs_v = self.visual_many(cx, &videos)?;
        let mut out = Vec::with_capacity(pairs.len());
        for (&(audio_raw, video_raw), x_v) in pairs.iter().zip(xs_v) {
            let x_a = self.audio(cx, audio_raw, Some(video_raw.rows()))?;
            let x_bn = self.bottleneck(cx, x_a, x_v)?;
            out.push(FrontendOut { x_a, x_v, x_bn });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, BN_EPS, LN_EPS};

    fn cfg(d: usize, d_v_raw: usize, posenc: bool) -> FrontendConfig {
        FrontendConfig {
            d_a_raw: 3,
            d_v_raw,
            d,
            stack_factor: 4,
            use_posenc: posenc,
            max_frames: 16,
        }
    }

    #[test]
    fn stacking_shapes_and_padding() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, -(i as f64)]).collect();
        let a = Tensor::from_rows(&rows).unwrap();
        let s = stack_audio_frames(&a, 4).unwrap();
        assert_eq!(s.shape(), &[2, 8]);
        assert_eq!(s.row(0), &[0.0, -0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0]);

        let a5 = Tensor::from_rows(&rows[..5]).unwrap();
        let s = stack_audio_frames(&a5, 4).unwrap();
        assert_eq!(s.shape(), &[2, 8]);
        assert_eq!(s.row(1), &[4.0, -4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(stack_audio_frames(&a5, 0).is_err());
    }

    #[test]
    fn zero_audio_gives_positions_only() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(4, 2, true), &mut RngStream::new(1, 1)).unwrap();
        let mut cx = Ctx::eval(&mut store);
        let x = fe.audio(&mut cx, &Tensor::zeros(&[8, 3]), Some(2)).unwrap();
        let want = sinusoidal_table::<f64>(16, 4);
        for t in 0..2 {
            for j in 0..4 {
                assert!((cx.value(x).get(t, j) - want.get(t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_lengths_are_sync_errors() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(4, 2, false), &mut RngStream::new(1, 1)).unwrap();
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
        let err = fe
            .forward(&mut cx, &Tensor::zeros(&[12, 3]), &Tensor::full(&[2, 2], 1.0))
            .unwrap_err();
        assert!(matches!(err, GilaError::Sync { audio: 3, video: 2 }), "{err}");
    }

    #[test]
    fn constant_video_train_mode_is_beta() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(4, 2, false), &mut RngStream::new(1, 1)).unwrap();
        let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
        let v = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        let x = fe.visual(&mut cx, &v).unwrap();
        // Zero-variance channels standardize to 0; beta = 0 and PReLU(0) = 0.
        assert!(cx.value(x).data().iter().all(|&y| y.abs() < 1e-12));
    }

    fn matmul_rows(x: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                (0..w.cols())
                    .map(|o| r.iter().enumerate().map(|(i, a)| a * w.get(i, o)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn audio_matches_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(4, 2, true), &mut RngStream::new(2, 1)).unwrap();
        let mut rng = RngStream::new(8, 0);
        let raw: Vec<Vec<f64>> = (0..7).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let mut stacked = vec![vec![0.0; 12]; 2];
        for (i, r) in raw.iter().enumerate() {
            stacked[i / 4][(i % 4) * 3..(i % 4) * 3 + 3].copy_from_slice(r);
        }
        let w = store.get(fe.audio_proj.w).tensor.clone();
        let pe = sinusoidal_table::<f64>(16, 4);
        let want: Vec<Vec<f64>> = matmul_rows(&stacked, &w)
            .iter()
            .enumerate()
            .map(|(t, h)| {
                let m = h.iter().sum::<f64>() / 4.0;
                let v = h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
                h.iter()
                    .enumerate()
                    .map(|(j, x)| (x - m) / (v + LN_EPS).sqrt() + pe.get(t, j))
                    .collect()
            })
            .collect();
        let mut cx = Ctx::eval(&mut store);
        let x = fe.audio(&mut cx, &Tensor::from_rows(&raw).unwrap(), Some(2)).unwrap();
        assert!(cx.value(x).max_abs_diff(&Tensor::from_rows(&want).unwrap()) < 1e-12);
    }

    #[test]
    fn identity_visual_adds_positions() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(3, 3, true), &mut RngStream::new(1, 1)).unwrap();
        store.set_value(fe.visual.w, Tensor::eye(3)).unwrap();
        store.set_value(fe.visual.slope, Tensor::full(&[1, 3], 1.0)).unwrap();
        store
            .set_value(fe.visual.running_var, Tensor::full(&[1, 3], 1.0 - BN_EPS))
            .unwrap();
        let v = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, -0.25]]).unwrap();
        let mut cx = Ctx::eval(&mut store);
        let x = fe.visual(&mut cx, &v).unwrap();
        let pe = sinusoidal_table::<f64>(16, 3);
        for t in 0..2 {
            for j in 0..3 {
                assert!((cx.value(x).get(t, j) - v.get(t, j) - pe.get(t, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bottleneck_cases() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(2, 2, false), &mut RngStream::new(4, 1)).unwrap();
        let bias = Tensor::from_rows(&[vec![0.5, -1.5]]).unwrap();
        store.set_value(fe.bottleneck.b.unwrap(), bias).unwrap();
        let xa = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]]).unwrap();
        let xv = Tensor::from_rows(&[vec![7.0, -1.0], vec![2.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let w = store.get(fe.bottleneck.w).tensor.clone();

        let mut cx = Ctx::eval(&mut store);
        let (z1, z2) = (
            cx.input(Tensor::zeros(&[3, 2])).unwrap(),
            cx.input(Tensor::zeros(&[3, 2])).unwrap(),
        );
        let y = fe.bottleneck(&mut cx, z1, z2).unwrap();
        assert_eq!(cx.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

        let (a, v) = (cx.input(xa.clone()).unwrap(), cx.input(xv.clone()).unwrap());
        let y = fe.bottleneck(&mut cx, a, v).unwrap();
        let cat: Vec<Vec<f64>> = (0..3).map(|t| [xa.row(t), xv.row(t)].concat()).collect();
        let want: Vec<Vec<f64>> = matmul_rows(&cat, &w)
            .into_iter()
            .map(|r| vec![r[0] + 0.5, r[1] - 1.5])
            .collect();
        assert!(cx.value(y).max_abs_diff(&Tensor::from_rows(&want).unwrap()) < 1e-14);
        let short = cx.input(Tensor::zeros(&[2, 2])).unwrap();
        assert!(fe.bottleneck(&mut cx, a, short).is_err());
        drop(cx);

        let mut sel = Tensor::zeros(&[4, 2]);
        sel.set(0, 0, 1.0);
        sel.set(1, 1, 1.0);
        store.set_value(fe.bottleneck.w, sel).unwrap();
        store
            .set_value(fe.bottleneck.b.unwrap(), Tensor::zeros(&[1, 2]))
            .unwrap();
        let mut cx = Ctx::eval(&mut store);
        let (a, v) = (cx.input(xa.clone()).unwrap(), cx.input(xv).unwrap());
        let y = fe.bottleneck(&mut cx, a, v).unwrap();
        assert_eq!(cx.value(y), &xa);
    }

    #[test]
    fn without_positions_frames_permute_with_the_input() {
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, cfg(4, 2, false), &mut RngStream::new(6, 1)).unwrap();
        let mut rng = RngStream::new(3, 3);
        let audio: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let video: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.normal()).collect()).collect();
        let perm = [2, 0, 1];
        let audio_p: Vec<Vec<f64>> = perm.iter().flat_map(|&t| audio[4 * t..4 * t + 4].to_vec()).collect();
        let video_p: Vec<Vec<f64>> = perm.iter().map(|&t| video[t].clone()).collect();
        let mut cx = Ctx::eval(&mut store);
        let out = fe
            .forward(
                &mut cx,
                &Tensor::from_rows(&audio).unwrap(),
                &Tensor::from_rows(&video).unwrap(),
            )
            .unwrap();
        let outp = fe
            .forward(
                &mut cx,
                &Tensor::from_rows(&audio_p).unwrap(),
                &Tensor::from_rows(&video_p).unwrap(),
            )
            .unwrap();
        for (x, xp) in [(out.x_a, outp.x_a), (out.x_v, outp.x_v), (out.x_bn, outp.x_bn)] {
            let permuted = cx.value(x).select_rows(&perm).unwrap();
            assert!(permuted.max_abs_diff(cx.value(xp)) < 1e-12);
        }
    }
}
