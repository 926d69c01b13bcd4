use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vodpipe_bench::{clustered_detections, random_box, rng};
use vodpipe_core::geometry::nms;

fn iou(c: &mut Criterion) {
    let mut r = rng(1);
    let pairs: Vec<_> = (0..1024)
        .map(|_| (random_box(&mut r), random_box(&mut r)))
        .collect();
    c.bench_function("iou/1024 pairs", |b| {
        b.iter(|| {
            pairs
                .iter()
                .map(|(x, y)| black_box(x).iou(black_box(y)))
                .sum::<f64>()
        })
    });
}

fn nms_sizes(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [16, 128, 1024] {
        let dets = clustered_detections(&mut rng(n as u64), n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &dets, |b, d| {
            b.iter(|| nms(black_box(d), 0.5))
        });
    }
    group.finish();
}

criterion_group!(benches, iou, nms_sizes);
criterion_main!(benches);
