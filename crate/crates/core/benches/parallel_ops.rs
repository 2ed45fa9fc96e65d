//! Sequential-vs-data-parallel timing for the two heaviest code paths:
//! the raw batched matrix product and a dense-attention forward on the
//! tape. Both modes run identical arithmetic and produce bit-identical
//! outputs, so these numbers show exactly what the rayon pool buys (or
//! costs) on the current machine. `ATNZ_THREADS` caps the pool as usual.

use atnz_core::attention;
use atnz_core::autodiff::Tape;
use atnz_core::rng::{derive, Rng};
use atnz_core::tensor::{self, Tensor};
use atnz_core::{set_parallel, FiniteCheckGuard};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const MODES: [(&str, bool); 2] = [("seq", false), ("par", true)];

fn matmul_square(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_f32");
    group.sample_size(10);
    for n in [256usize, 512] {
        let mut rng = Rng::new(derive(0xB0, n as u64));
        let a: Tensor<f32> = tensor::randn(&mut rng, &[n, n], 1.0);
        let b: Tensor<f32> = tensor::randn(&mut rng, &[n, n], 1.0);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        for (mode, wide) in MODES {
            group.bench_with_input(BenchmarkId::new(mode, n), &n, |bench, _| {
                set_parallel(wide);
                // One validated call; the replays skip the output scan so
                // the measurement covers arithmetic alone.
                a.matmul(&b).unwrap();
                let _unchecked = FiniteCheckGuard::skip();
                bench.iter(|| a.matmul(&b).unwrap());
            });
        }
    }
    group.finish();
    set_parallel(true);
}

fn attention_forward(c: &mut Criterion) {
    let (n, d) = (1024usize, 32usize);
    let mut group = c.benchmark_group("dense_attention_f32");
    group.sample_size(10);
    group.throughput(Throughput::Elements((n * n * d) as u64));
    let mut rng = Rng::new(derive(0xB1, n as u64));
    let q: Tensor<f32> = tensor::randn(&mut rng, &[n, d], 1.0);
    let k: Tensor<f32> = tensor::randn(&mut rng, &[n, d], 1.0);
    let v: Tensor<f32> = tensor::randn(&mut rng, &[n, d], 1.0);
    for (mode, wide) in MODES {
        group.bench_function(BenchmarkId::new(mode, n), |bench| {
            set_parallel(wide);
            let mut tape: Tape<f32> = Tape::new();
            let qn = tape.constant(q.clone());
            let kn = tape.constant(k.clone());
            let vn = tape.constant(v.clone());
            let mark = tape.len();
            attention::softmax_attention(&mut tape, qn, kn, vn).unwrap();
            let _unchecked = FiniteCheckGuard::skip();
            bench.iter(|| {
                tape.truncate(mark);
                attention::softmax_attention(&mut tape, qn, kn, vn).unwrap()
            });
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(modes, matmul_square, attention_forward);
criterion_main!(modes);
