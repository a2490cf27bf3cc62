use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use gila_bench::random_tensor;
use gila_core::align::within_layer_loss;
use gila_core::gi::{GiConfig, GiStack};
use gila_core::numerics::{Ctx, MultiHeadAttention};
use gila_core::{Mode, ParamStore, RngStream, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (random_tensor(n, n, 1), random_tensor(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
                black_box(t.matmul(x, y).unwrap())
            })
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let x = random_tensor(40, 40, 3);
    c.bench_function("softmax_40x40_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true).unwrap();
            let s = t.softmax(v, true).unwrap();
            let l = t.sum(s).unwrap();
            black_box(t.backward(l).unwrap())
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 64, 4, &mut RngStream::new(4, 4)).unwrap();
    let x = random_tensor(40, 64, 5);
    c.bench_function("mha_d64_t40_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut cx = Ctx::new(&mut store, Mode::Train, 0.0, RngStream::new(0, 0));
            let v = cx.input(x.clone()).unwrap();
            let out = mha.forward(&mut cx, v, v, v, false).unwrap();
            let l = cx.tape.sum(out.out).unwrap();
            black_box(cx.tape.backward(l).unwrap())
        })
    });
}

fn gi_stack(c: &mut Criterion) {
    let cfg = GiConfig {
        d: 64,
        heads: 4,
        d_ff: 256,
        layers: 1,
        use_cross_attn: true,
        use_ir: true,
    };
    let mut store = ParamStore::<f32>::new();
    let stack = GiStack::new(&mut store, cfg, &mut RngStream::new(6, 6)).unwrap();
    let ins = [
        random_tensor(40, 64, 7),
        random_tensor(40, 64, 8),
        random_tensor(40, 64, 9),
    ];
    c.bench_function("gi_stack_one_layer_d64_t40_eval", |bench| {
        bench.iter(|| {
            let mut cx = Ctx::new(&mut store, Mode::Eval, 0.0, RngStream::new(0, 0));
            let v: Vec<_> = ins.iter().map(|x| cx.input(x.clone()).unwrap()).collect();
            black_box(stack.forward(&mut cx, v[0], v[1], v[2]).unwrap())
        })
    });
}

fn within_layer(c: &mut Criterion) {
    let (a, v) = (random_tensor(40, 64, 10), random_tensor(40, 64, 11));
    c.bench_function("within_layer_loss_t40_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, y) = (t.leaf(a.clone(), true).unwrap(), t.leaf(v.clone(), true).unwrap());
            let l = within_layer_loss(&mut t, x, y, 0.1).unwrap();
            black_box(t.backward(l).unwrap())
        })
    });
}

criterion_group!(benches, matmul, softmax, attention, gi_stack, within_layer);
criterion_main!(benches);
