use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdsvm_bench::{conv_inputs, sample_inputs, scan_inputs, tube_pair};
use mdsvm_core::autodiff::{conv3d_forward, conv3d_forward_generic, grid_sample_forward};
use mdsvm_core::metrics::{extract_surface, surface_distances, DistanceMethod};
use mdsvm_core::{Conv3dOptions, Graph, ScanStrategy};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_3x3x3");
    for s in [8, 16] {
        let (x, w) = conv_inputs(8, s);
        let opts = Conv3dOptions::padded(1);
        group.bench_with_input(BenchmarkId::new("fast", s), &s, |b, _| {
            b.iter(|| conv3d_forward(black_box(&x), &w, None, opts).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("generic", s), &s, |b, _| {
            b.iter(|| conv3d_forward_generic(black_box(&x), &w, None, opts).unwrap())
        });
    }
    group.finish();
}

fn grid_sample(c: &mut Criterion) {
    let (x, coords) = sample_inputs(4, 16, 9 * 16 * 16 * 16);
    c.bench_function("grid_sample_trilinear", |b| {
        b.iter(|| grid_sample_forward(black_box(&x), &coords).unwrap())
    });
}

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    let ops = scan_inputs(4096, 16, 16);
    for (name, strategy) in [
        ("sequential", ScanStrategy::Sequential),
        ("chunked64", ScanStrategy::Chunked(64)),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let v: Vec<_> = ops.iter().map(|t| g.constant(t.clone())).collect();
                g.selective_scan(v[0], v[1], v[2], v[3], v[4], Some(v[5]), strategy)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn hausdorff(c: &mut Criterion) {
    let mut group = c.benchmark_group("surface_distances");
    let (a, b) = tube_pair(32);
    assert!(!extract_surface(&a).is_empty());
    for (name, method) in [
        ("exhaustive", DistanceMethod::Exhaustive),
        ("indexed", DistanceMethod::Indexed),
    ] {
        group.bench_function(name, |bench| {
            bench.iter(|| surface_distances(black_box(&a), &b, method).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, grid_sample, scan, hausdorff);
criterion_main!(benches);
