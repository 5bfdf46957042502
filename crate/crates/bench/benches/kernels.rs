use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modalfuse::fusion::{block_identity_kernel, fuse_conv, fuse_max, fuse_sum};
use modalfuse::tensor::{conv3d_backward, conv3d_valid, conv3d_valid_reference};
use modalfuse::{ArchitectureSpec, FusionFn, FusionPoint, FusionSpec, LabelVolume, Network, Variant};
use modalfuse_bench::{random_batch, random_kernel, random_tensor};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    g.sample_size(10);
    // First layer of the baseline and a mid-network layer.
    for (name, ci, co, ext) in [("4to30@25", 4, 30, 25), ("30to40@19", 30, 40, 19)] {
        let x = random_tensor(&[ci, ext, ext, ext], 1);
        let k = random_kernel(co, ci, 3, 2);
        g.bench_with_input(BenchmarkId::new("fast", name), &(), |b, _| b.iter(|| conv3d_valid(black_box(&x), &k).unwrap()));
        g.bench_with_input(BenchmarkId::new("reference", name), &(), |b, _| {
            b.iter(|| conv3d_valid_reference(black_box(&x), &k).unwrap())
        });
        let y = conv3d_valid(&x, &k).unwrap();
        let gy = random_tensor(y.shape(), 3);
        g.bench_with_input(BenchmarkId::new("backward", name), &(), |b, _| {
            b.iter(|| conv3d_backward(black_box(&x), &k, &gy).unwrap())
        });
    }
    g.finish();
}

fn fusion(c: &mut Criterion) {
    let mut g = c.benchmark_group("fusion");
    let s = random_tensor(&[4, 50, 9, 9, 9], 4);
    let k = block_identity_kernel(4, 50, 0.25f32);
    g.bench_function("max", |b| b.iter(|| fuse_max(black_box(&s)).unwrap()));
    g.bench_function("sum", |b| b.iter(|| fuse_sum(black_box(&s)).unwrap()));
    g.bench_function("conv", |b| b.iter(|| fuse_conv(black_box(&s), &k).unwrap()));
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    let variants = [
        Variant::Baseline,
        Variant::Fused(FusionSpec::new(FusionPoint::Early, FusionFn::Sum)),
        Variant::Fused(FusionSpec::new(FusionPoint::Late, FusionFn::Conv)),
    ];
    for v in variants {
        let spec = ArchitectureSpec::standard(v);
        let net = Network::<f32>::build_seeded(&spec, 0).unwrap();
        let x = random_batch(&spec, 2, 5);
        g.bench_with_input(BenchmarkId::new("predict", v.to_string()), &(), |b, _| {
            b.iter(|| net.predict(black_box(&x)).unwrap())
        });
        let tiny = ArchitectureSpec::tiny(v);
        let mut small = Network::<f32>::build_seeded(&tiny, 0).unwrap();
        let xs = random_batch(&tiny, 8, 6);
        let labels: Vec<LabelVolume> = (0..8).map(|_| LabelVolume::zeros(&[9, 9, 9])).collect();
        g.bench_with_input(BenchmarkId::new("tiny-train-step", v.to_string()), &(), |b, _| {
            b.iter(|| small.loss_and_grad(black_box(&xs), &labels, 7).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, fusion, network);
criterion_main!(benches);
