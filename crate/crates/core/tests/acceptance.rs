//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. The ablation trains nine desk-scale models
//! and dominates the runtime (about 25 minutes on one core).

use std::time::Instant;

use gila_core::align::{cross_layer_loss, sample_frame_spans, within_layer_loss, AlignConfig, Negatives, Targets};
use gila_core::data::{dual_flow_batch, measured_snr_db, AugMode, Corpus, NoiseKind, Split};
use gila_core::gi::{GiConfig, GiStack};
use gila_core::harness::diagnostics::{diagonal_mass, dump_attention, dump_similarity, off_diagonal_mean};
use gila_core::harness::gradsuite::{run_gradient_suite, SUITE_SEEDS};
use gila_core::harness::{evaluate, load_model, save_model, train, Ablation, GilaModel, LossRng, NoiseEval, RunConfig};
use gila_core::numerics::{Ctx, Purpose};
use gila_core::{Mode, ParamStore, RngStream, Tape, Tensor};

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, pass: bool, name: &str, detail: String) {
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let cases = run_gradient_suite(&SUITE_SEEDS).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = cases.iter().map(|c| c.max_rel_error / c.tolerance).fold(0.0, f64::max);
    r.record(
        failed.is_empty() && secs < 120.0,
        "gradient suite",
        format!(
            "{} cases x {} seeds, worst error/tolerance {worst:.3}, failed {failed:?}, {secs:.1}s (limit 120s)",
            cases.len(),
            SUITE_SEEDS.len()
        ),
    );
}

fn rows(t: &mut Tape<f64>, rows: &[Vec<f64>]) -> gila_core::Var {
    t.constant(Tensor::from_rows(rows).unwrap()).unwrap()
}

fn closed_form_losses(r: &mut Report) {
    let mut t = Tape::new();
    let same = vec![vec![0.6, 0.8]; 4];
    let (a, v) = (rows(&mut t, &same), rows(&mut t, &same));
    let uniform = within_layer_loss(&mut t, a, v, 0.1).unwrap();
    let uniform = t.scalar(uniform);
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (a, v) = (rows(&mut t, &e), rows(&mut t, &e));
    let ortho = within_layer_loss(&mut t, a, v, 0.1).unwrap();
    let ortho = t.scalar(ortho);
    let vocab = 23;
    let logits = t.constant(Tensor::zeros(&[5, vocab])).unwrap();
    let ce = t
        .cross_entropy(logits, &[Some(3), Some(0), Some(22), Some(7), Some(7)])
        .unwrap();
    let ce = t.scalar(ce);
    let (d1, d2, d3) = (
        (uniform - 4.0 * 4f64.ln()).abs(),
        (ortho - 9.08e-5).abs(),
        (ce - (vocab as f64).ln()).abs(),
    );
    r.record(
        d1 < 1e-6 && d2 < 1e-6 && d3 < 1e-9,
        "closed-form losses",
        format!("uniform T=4 {uniform:.10} (|d| {d1:.1e}), orthonormal T=2 {ortho:.4e} (|d| {d2:.1e}), CE ln|V| |d| {d3:.1e}"),
    );
}

fn gi_config(d: usize) -> GiConfig {
    GiConfig {
        d,
        heads: 2,
        d_ff: 2 * d,
        layers: 3,
        use_cross_attn: true,
        use_ir: true,
    }
}

fn random(rng: &mut RngStream, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(&[r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

fn oracle_equivalence(r: &mut Report) {
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = RngStream::new(trial, 77);
        let mut store = ParamStore::<f64>::new();
        let stack = GiStack::new(&mut store, gi_config(8), &mut rng).unwrap();
        let frames = 3 + (trial as usize % 6);
        let ins: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, frames, 8)).collect();
        let mut cx = Ctx::new(&mut store, Mode::Eval, 0.0, RngStream::new(0, 0));
        let v: Vec<_> = ins.into_iter().map(|x| cx.input(x).unwrap()).collect();
        let trace = stack.forward(&mut cx, v[0], v[1], v[2]).unwrap();
        let j = trial as usize % 4;
        let (xa, xv) = (trace.x_a(j).unwrap(), trace.x_v(j).unwrap());
        let idx: Vec<usize> = (0..frames).collect();
        let cl = cross_layer_loss(&mut cx, xa, xv, &idx, Targets::Raw, Negatives::All, 0.1).unwrap();
        let wl = within_layer_loss(&mut cx.tape, xa, xv, 0.1).unwrap();
        worst = worst.max((cx.tape.scalar(cl) - cx.tape.scalar(wl)).abs());
    }
    r.record(
        worst < 1e-10,
        "oracle equivalence",
        format!("20 traces, max |CL - WL| {worst:.2e} (limit 1e-10)"),
    );
}

fn permute(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

fn permutation_equivariance(r: &mut Report) {
    let mut rng = RngStream::new(5, 78);
    let mut store = ParamStore::<f64>::new();
    let stack = GiStack::new(&mut store, gi_config(16), &mut rng).unwrap();
    let frames = 9;
    let ins: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, frames, 16)).collect();
    let run = |store: &mut ParamStore<f64>, xs: &[Tensor<f64>]| {
        let mut cx = Ctx::new(store, Mode::Eval, 0.0, RngStream::new(0, 0));
        let v: Vec<_> = xs.iter().map(|x| cx.input(x.clone()).unwrap()).collect();
        let trace = stack.forward(&mut cx, v[0], v[1], v[2]).unwrap();
        trace.snapshot(&cx)
    };
    let plain = run(&mut store, &ins);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let pool: Vec<usize> = (0..frames).collect();
        let perm = rng.choose_distinct(&pool, frames);
        let moved = run(&mut store, &ins.iter().map(|x| permute(x, &perm)).collect::<Vec<_>>());
        for (a, b) in plain.iter().zip(&moved) {
            for (x, y) in permute(a, &perm).data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    r.record(
        worst < 1e-10,
        "permutation equivariance",
        format!(
            "10 permutations of T={frames}, {} trace tensors, max deviation {worst:.2e} (limit 1e-10)",
            plain.len()
        ),
    );
}

fn within_sigmas(count: usize, n: usize, p: f64) -> (bool, f64) {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let z = (count as f64 - mean) / sigma;
    (z.abs() < 4.0, z)
}

fn sampler_statistics(r: &mut Report) {
    let trials = 10_000u64;
    let align = AlignConfig::default();
    let corpus = Corpus::generate(&RunConfig::default().corpus).unwrap();
    let frames = corpus.train[0].frames();

    let mut span_ok = true;
    let mut notes = Vec::new();
    for pair in &align.cross {
        let starts: usize = (0..trials)
            .map(|i| {
                let mut rng = LossRng::derive(9, &[i]).spans;
                sample_frame_spans(frames, pair.span_prob, align.span_len, &mut rng)
                    .starts
                    .len()
            })
            .sum();
        let (ok, z) = within_sigmas(starts, frames * trials as usize, pair.span_prob);
        span_ok &= ok;
        notes.push(format!("span starts p={} z={z:+.2}", pair.span_prob));
    }

    let p_noise = 0.25;
    let mut applied = 0;
    let mut worst_snr: f64 = 0.0;
    for i in 0..trials {
        let s = &corpus.train[i as usize % corpus.train.len()];
        let mut rng = RngStream::derive(9, Purpose::Noise, &[i]);
        let flows = dual_flow_batch(&corpus, s, AugMode::NoiseAug, p_noise, 0.0, &mut rng).unwrap();
        if !flows[0].clean {
            applied += 1;
            worst_snr = worst_snr.max(measured_snr_db(&s.audio, &flows[0].sample.audio).abs());
        }
        let mut rng = RngStream::derive(9, Purpose::Noise, &[i, 1]);
        let pair = dual_flow_batch(&corpus, s, AugMode::DataAug, p_noise, 0.0, &mut rng).unwrap();
        worst_snr = worst_snr.max(measured_snr_db(&s.audio, &pair[1].sample.audio).abs());
    }
    let (noise_ok, z) = within_sigmas(applied, trials as usize, p_noise);
    notes.push(format!("noise applied {applied}/{trials} z={z:+.2}"));
    for s in corpus.split(Split::Test) {
        for kind in NoiseKind::ALL {
            for &snr in &corpus.cfg.snr_levels {
                let n = corpus.eval_noisy(s, kind, snr).unwrap();
                worst_snr = worst_snr.max((measured_snr_db(&s.audio, &n.audio) - snr).abs());
            }
        }
    }
    notes.push(format!("worst SNR error {worst_snr:.2e} dB"));
    r.record(
        span_ok && noise_ok && worst_snr < 0.01,
        "sampler and augmentation statistics",
        format!("{} (limits 4 sigma, 0.01 dB)", notes.join(", ")),
    );
}

fn memorization(r: &mut Report) {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.corpus.train_size = 1;
    cfg.corpus.val_size = 0;
    cfg.corpus.test_size = 0;
    cfg.model.dropout = 0.0;
    cfg.aug.p_noise = 0.0;
    cfg.optim.batch_size = 1;
    cfg.optim.total_steps = 500;
    cfg.optim.warmup_steps = 50;
    let out = train::<f32>(cfg.clone(), None).unwrap();
    let reached = out.metrics.iter().find(|m| m.loss.asr < 0.1).map(|m| m.step);
    let corpus = Corpus::generate(&cfg.corpus).unwrap();
    let sample = &corpus.train[0];
    let mut model = out.model;
    let decoded = model.decode(sample).unwrap();
    let exact = decoded.transcript() == sample.tokens().transcript();
    let secs = start.elapsed().as_secs_f64();
    r.record(
        reached.is_some() && exact && secs < 60.0,
        "memorization",
        format!(
            "L_ASR < 0.1 at step {reached:?}, final L_ASR {:.4}, exact decode {exact}, {secs:.1}s (limit 60s)",
            out.metrics.last().unwrap().loss.asr
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Trained {
    gi: GilaModel<f32>,
    gila: GilaModel<f32>,
}

fn ablation(r: &mut Report) -> Trained {
    let start = Instant::now();
    let base_cfg = RunConfig::default();
    let corpus = Corpus::generate(&base_cfg.corpus).unwrap();
    let presets = [
        ("baseline", Ablation::baseline()),
        ("gi", Ablation::gi()),
        ("gila", Ablation::gila()),
    ];
    let mut wers = vec![Vec::new(); 3];
    let (mut gi, mut gila) = (None, None);
    for seed in [1, 2, 3] {
        for (p, (name, ab)) in presets.iter().enumerate() {
            let cfg = RunConfig {
                seed,
                ablation: *ab,
                ..base_cfg.clone()
            };
            let mut model = train::<f32>(cfg, None).unwrap().best_model();
            let rep = evaluate(&mut model, &corpus, Split::Test, NoiseEval::Grid).unwrap();
            let noisy = rep.wer_noisy_avg.unwrap();
            println!(
                "  seed {seed} {name:8} clean WER {:.4} noisy WER {noisy:.4} ({:.0}s elapsed)",
                rep.wer_clean,
                start.elapsed().as_secs_f64()
            );
            wers[p].push(noisy);
            if seed == 1 && *name == "gi" {
                gi = Some(model);
            } else if seed == 1 && *name == "gila" {
                gila = Some(model);
            }
        }
    }
    let [b, g, l] = [0, 1, 2].map(|i| median(wers[i].clone()));
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let relative = 1.0 - l / b;
    r.record(
        b >= g && g >= l && relative >= 0.10 && mins < 45.0,
        "ablation trend",
        format!(
            "median noisy WER baseline {b:.4} >= gi {g:.4} >= gila {l:.4}, gila {:.1}% better than baseline (need 10%), {mins:.1} min (limit 45)",
            100.0 * relative
        ),
    );
    Trained {
        gi: gi.unwrap(),
        gila: gila.unwrap(),
    }
}

fn diagnostics(r: &mut Report, trained: &mut Trained) {
    let corpus = Corpus::generate(&trained.gila.cfg.corpus).unwrap();
    let utts = &corpus.test[..10];
    let sim = dump_similarity(&mut trained.gila, utts).unwrap();
    let (diag, off) = (diagonal_mass(&sim.av), off_diagonal_mean(&sim.av));
    let m = trained.gila.cfg.model.gi_layers;
    let mass = |model: &mut GilaModel<f32>| {
        utts.iter()
            .map(|s| diagonal_mass(&dump_attention(model, s, m, m).unwrap()))
            .sum::<f64>()
            / utts.len() as f64
    };
    let (gila_mass, gi_mass) = (mass(&mut trained.gila), mass(&mut trained.gi));
    r.record(
        diag > off && gila_mass > gi_mass,
        "diagnostics",
        format!(
            "A-V similarity diagonal {diag:.4} vs off-diagonal {off:.4}; attention diagonal mass ({m},{m}) gila {gila_mass:.4} vs gi {gi_mass:.4}"
        ),
    );
}

fn determinism(r: &mut Report, trained: &Trained) {
    let mut cfg = RunConfig {
        seed: 11,
        ..RunConfig::default()
    };
    cfg.optim.total_steps = 40;
    cfg.optim.warmup_steps = 10;
    cfg.optim.eval_every = 20;
    cfg.ablation.use_data_aug = true;
    let a = train::<f64>(cfg.clone(), None).unwrap().metrics_csv();
    let b = train::<f64>(cfg, None).unwrap().metrics_csv();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gila");
    let mut model = trained.gila.clone();
    let corpus = Corpus::generate(&model.cfg.corpus).unwrap();
    let before = evaluate(&mut model, &corpus, Split::Test, NoiseEval::Grid).unwrap();
    save_model(&path, &model).unwrap();
    let mut back: GilaModel<f32> = load_model(&path, Some(&model.cfg), false).unwrap();
    let after = evaluate(&mut back, &corpus, Split::Test, NoiseEval::Grid).unwrap();
    let same_eval = before == after;
    r.record(
        a == b && same_eval,
        "determinism and persistence",
        format!(
            "identical f64 metrics CSV {} ({} rows), checkpoint round trip evaluation identical {same_eval}",
            a == b,
            a.lines().count() - 1
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { lines: Vec::new() };
    gradient_suite(&mut r);
    closed_form_losses(&mut r);
    oracle_equivalence(&mut r);
    permutation_equivariance(&mut r);
    sampler_statistics(&mut r);
    memorization(&mut r);
    let mut trained = ablation(&mut r);
    diagnostics(&mut r, &mut trained);
    determinism(&mut r, &trained);

    println!("\nacceptance summary");
    for (_, line) in &r.lines {
        println!("{line}");
    }
    let failed: Vec<&String> = r.lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "{} criteria failed: {failed:#?}", failed.len());
}
