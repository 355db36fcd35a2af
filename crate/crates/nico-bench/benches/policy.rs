//! Policy network forward, backward, and sampling at production size.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nico_bench::{bench_history, bench_instance, bench_tour};
use nico_core::features::compute_features;
use nico_core::nn::ParamModule;
use nico_core::rng::rng_from;
use nico_core::{PolicyConfig, PolicyNet};

const SIZES: [usize; 3] = [20, 50, 100];

fn policy(c: &mut Criterion) {
    let mut group = c.benchmark_group("policy");
    group.measurement_time(Duration::from_secs(3)).sample_size(10);

    let mut net = PolicyNet::new(PolicyConfig::default(), 1).expect("default policy");

    for n in SIZES {
        let instance = bench_instance(n);
        let tour = bench_tour(n);
        let history = bench_history(n);
        let features = compute_features(&instance, &tour, &history).unwrap();

        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| black_box(net.forward(&features, &history, true).unwrap()))
        });

        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |b, _| {
            b.iter(|| {
                let (out, cache) = net.forward(&features, &history, true).unwrap();
                // Pull gradient through every live log-probability.
                let mut d = ndarray::Array2::zeros((n, n));
                for ((i, j), &live) in out.mask.indexed_iter() {
                    if live {
                        d[[i, j]] = 1.0;
                    }
                }
                net.backward(&cache, &d);
                net.zero_grad();
                black_box(out.log_probs[[0, 2]])
            })
        });

        group.bench_with_input(BenchmarkId::new("sample", n), &n, |b, _| {
            let (out, _) = net.forward(&features, &history, true).unwrap();
            let mut rng = rng_from(&[42, n as u64]);
            b.iter(|| black_box(out.sample(&mut rng).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, policy);
criterion_main!(benches);
