//! Data-parallel kernels on a single worker versus the default pool.
//!
//! Build with `--no-default-features` to measure the plain-iterator fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdn_core::datagen::flow::{estimate_flow, FlowOpts};
use rdn_core::datagen::synthetic::{panning_clip, Texture};
use rdn_core::exec::with_workers;
use rdn_core::net::{init_params, rdn_unroll, rdn_unroll_grad, WidthMultiplier};
use rdn_core::ops::{conv2d, conv2d_backward, BnMode, ConvSpec};
use rdn_core::Tensor;

const POOLS: [(&str, usize); 2] = [("one_worker", 1), ("default_pool", 0)];

fn random(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let spec = ConvSpec::new(3, 32, 32, 1);
    let x = random([4, 32, 64, 64], 1);
    let w = random(spec.weight_shape(), 2);
    let dy = random([4, 32, 64, 64], 3);
    let mut g = c.benchmark_group("conv3x3_32ch_64px_b4");
    for (name, workers) in POOLS {
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| with_workers(workers, || conv2d(&x, &spec, &w, None).unwrap()))
        });
        g.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| with_workers(workers, || conv2d_backward(&x, &spec, &w, &dy).unwrap()))
        });
    }
    g.finish();
}

fn unroll(c: &mut Criterion) {
    let params = init_params::<f32>(WidthMultiplier::new(1, 8).unwrap(), 0).unwrap();
    let frames: Vec<Tensor<f32>> = (0..5).map(|i| random([4, 3, 64, 64], 10 + i).map(|v| 0.5 + 0.5 * v)).collect();
    let gt = frames[0].clone();
    let mut g = c.benchmark_group("unroll_4steps_wm1_8_64px_b4");
    g.sample_size(10);
    for (name, workers) in POOLS {
        g.bench_function(BenchmarkId::new("infer", name), |b| {
            b.iter(|| with_workers(workers, || rdn_unroll(&frames, &params, None, BnMode::Infer).unwrap()))
        });
        g.bench_function(BenchmarkId::new("train_grad", name), |b| {
            b.iter(|| with_workers(workers, || rdn_unroll_grad(&frames, &params, &gt, BnMode::Train).unwrap()))
        });
    }
    g.finish();
}

fn flow(c: &mut Criterion) {
    let clip = panning_clip(&Texture::random(3, 12), 128, 128, 2, (1.0, 2.0));
    let opts = FlowOpts::default();
    let mut g = c.benchmark_group("flow_128px");
    g.sample_size(10);
    for (name, workers) in POOLS {
        g.bench_function(name, |b| {
            b.iter(|| with_workers(workers, || estimate_flow(&clip[0], &clip[1], &opts).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, unroll, flow);
criterion_main!(benches);
