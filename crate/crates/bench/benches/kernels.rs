use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtslu::losses::ctc_loss;
use mtslu::Tape;
use mtslu_bench::normal;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128, 256] {
        let a = normal(&[n, n], 1);
        let b = normal(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone(), true), tape.leaf(b.clone(), true));
                black_box(x.matmul(&y).unwrap().sum().backward().unwrap());
            })
        });
    }
    group.finish();
}

fn ctc(c: &mut Criterion) {
    let mut group = c.benchmark_group("ctc_forward_backward");
    for frames in [25, 50, 100] {
        let logits = normal(&[frames, 32], 3);
        let target: Vec<usize> = (0..frames / 3).map(|i| 5 + i % 26).collect();
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let lp = tape.leaf(logits.clone(), true).log_softmax(1).unwrap();
                black_box(ctc_loss(&lp, &target, 0).unwrap().backward().unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, ctc);
criterion_main!(benches);
