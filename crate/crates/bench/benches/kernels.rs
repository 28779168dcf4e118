use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unitrans_bench::{random_tensor, unit_sequences};
use unitrans_core::evalkit::corpus_bleu;
use unitrans_core::numerics::{Segments, Tape};
use unitrans_core::translator::{expand_units, reduce_units};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let (a, b) = (random_tensor(&[n, n], 1), random_tensor(&[n, n], 2));
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(&a), tape.leaf(&b));
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                tape.backward(s).unwrap();
                black_box(tape.grad(x).is_some())
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (seqs, len, d) = (32usize, 20usize, 128usize);
    let q = random_tensor(&[seqs * len, d], 3);
    let k = random_tensor(&[seqs * len, d], 4);
    let v = random_tensor(&[seqs * len, d], 5);
    let segs = Segments::uniform(seqs, len).unwrap();
    c.bench_function("attention/causal_32x20x128", |bench| {
        bench.iter(|| {
            let mut tape = Tape::inference();
            let (q, k, v) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
            black_box(tape.attention(q, k, v, &segs, &segs, 4, true).unwrap())
        })
    });
}

fn bleu(c: &mut Criterion) {
    let hyps = unit_sequences(500, 40, 50, 6);
    let refs = unit_sequences(500, 40, 50, 7);
    c.bench_function("corpus_bleu/500x40", |bench| {
        bench.iter(|| black_box(corpus_bleu(&hyps, &refs, 4, false).unwrap().score))
    });
}

fn run_length(c: &mut Criterion) {
    let seqs = unit_sequences(10_000, 30, 8, 8);
    c.bench_function("reduce_expand/10k", |bench| {
        bench.iter(|| {
            let mut total = 0;
            for s in &seqs {
                total += expand_units(&reduce_units(s)).unwrap().len();
            }
            black_box(total)
        })
    });
}

criterion_group!(kernels, matmul, attention, bleu, run_length);
criterion_main!(kernels);
