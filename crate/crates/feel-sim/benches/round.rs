//! Rayon vs sequential throughput on the data-parallel inner loops:
//! per-device round work (local SGD + compression) and the Monte Carlo
//! bound trials.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use feel_sim::compression::{compress_round, dequantize, CompressionSpec};
use feel_sim::learning::{
    local_sgd, partition, synthesize_dataset, Dataset, ModelSpec, PartitionMode,
};
use feel_sim::math::{top_k_mask, ParamVector, Purpose, RngStream};
use feel_sim::par::map_indexed_seq;

#[cfg(feature = "parallel")]
use feel_sim::par::map_indexed_par;

struct RoundSetup {
    model: ModelSpec,
    comp: CompressionSpec,
    shards: Vec<Dataset>,
    w: ParamVector,
    g_hat: ParamVector,
    root: RngStream,
}

fn round_setup(n_devices: usize) -> RoundSetup {
    let root = RngStream::new(2024);
    let model = ModelSpec::new(vec![20, 32, 10]).unwrap();
    let d = model.param_count();
    let comp = CompressionSpec::new(d / 5, d / 20, 16, d).unwrap();
    let data = synthesize_dataset(10, 128 * n_devices, 20, 3.0, root.child(0)).unwrap();
    let shards = partition(&data, n_devices, PartitionMode::Iid, root.child(1)).unwrap();
    let w = model.init_params(root.purpose(Purpose::InitWeights));
    let g_hat = w.scale(1e-3);
    RoundSetup {
        model,
        comp,
        shards,
        w,
        g_hat,
        root,
    }
}

fn device_work(setup: &RoundSetup, dev: usize) -> f64 {
    let g = local_sgd(
        &setup.model,
        &setup.w,
        &setup.shards[dev],
        5,
        32,
        0.05,
        setup.root.child(100).child(dev as u64),
    )
    .unwrap();
    let (global_part, local_q) = compress_round(
        &g,
        &setup.g_hat,
        &setup.comp,
        setup.root.child(200).child(dev as u64),
    )
    .unwrap();
    global_part.norm_sq() + dequantize(&local_q).norm_sq()
}

fn bench_device_round(c: &mut Criterion) {
    let mut group = c.benchmark_group("device_round");
    for &n_devices in &[4usize, 16] {
        let setup = round_setup(n_devices);
        group.bench_with_input(
            BenchmarkId::new("sequential", n_devices),
            &n_devices,
            |b, &n| b.iter(|| map_indexed_seq(n, |dev| device_work(&setup, dev))),
        );
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("rayon", n_devices), &n_devices, |b, &n| {
            b.iter(|| map_indexed_par(n, |dev| device_work(&setup, dev)))
        });
    }
    group.finish();
}

fn bound_trial(root: RngStream, spec: &CompressionSpec, t: usize) -> f64 {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let draw = root.child(t as u64);
    let mut rng = draw.child(0).rng();
    let x = ParamVector::from_vec(
        (0..spec.d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap();
    let (g, l) = compress_round(&x, &x, spec, draw.child(1)).unwrap();
    let mut resid = x.clone();
    resid.sub_assign(&g.densify());
    resid.sub_assign(&dequantize(&l).densify());
    resid.norm_sq() / x.norm_sq()
}

fn bench_bound_trials(c: &mut Criterion) {
    let spec = CompressionSpec::new(200, 50, 16, 1000).unwrap();
    let root = RngStream::new(99).purpose(Purpose::Verify);
    let trials = 256usize;
    let mut group = c.benchmark_group("bound_trials");
    group.bench_function("sequential", |b| {
        b.iter(|| {
            map_indexed_seq(trials, |t| bound_trial(root, &spec, t))
                .iter()
                .sum::<f64>()
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("rayon", |b| {
        b.iter(|| {
            map_indexed_par(trials, |t| bound_trial(root, &spec, t))
                .iter()
                .sum::<f64>()
        })
    });
    group.finish();
}

fn bench_top_k_selection(c: &mut Criterion) {
    use rand::Rng;
    let d = 100_000;
    let mut rng = RngStream::new(7).rng();
    let x = ParamVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    c.bench_function("top_k_mask_100k", |b| {
        b.iter(|| top_k_mask(&x, d / 10).unwrap())
    });
}

criterion_group!(
    benches,
    bench_device_round,
    bench_bound_trials,
    bench_top_k_selection
);
criterion_main!(benches);
