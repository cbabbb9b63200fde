use std::hint::black_box;

use cmsenti::model::scaled_dot_attention;
use cmsenti::numeric::{kernels, Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let a = random(n * n, &mut rng);
        let b = random(n * n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| kernels::matmul(black_box(&a), black_box(&b), n, n, n))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // 32 sequences x 8 heads, 64 tokens, head width 32
    let (n, t, dk) = (256, 64, 32);
    let q = Tensor::new(&[n, t, dk], random(n * t * dk, &mut rng)).unwrap();
    let k = Tensor::new(&[n, t, dk], random(n * t * dk, &mut rng)).unwrap();
    let v = Tensor::new(&[n, t, dk], random(n * t * dk, &mut rng)).unwrap();
    let blocked: Vec<bool> = (0..n * t * t).map(|i| i % t >= 48).collect();
    let mut group = c.benchmark_group("attention");
    group.sample_size(20);
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (q, k, v) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
            let (out, _) = scaled_dot_attention(&mut tape, q, k, v, &blocked).unwrap();
            black_box(tape.value(out)[0])
        })
    });
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let q = tape.leaf(q.clone().with_grad());
            let k = tape.leaf(k.clone().with_grad());
            let v = tape.leaf(v.clone().with_grad());
            let (out, _) = scaled_dot_attention(&mut tape, q, k, v, &blocked).unwrap();
            let loss = tape.sum(out);
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, attention);
criterion_main!(benches);
