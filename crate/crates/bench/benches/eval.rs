use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vodpipe_bench::{eval_workload, rng};
use vodpipe_core::eval::{average_precision, brute_force_ap, match_detections, Interpolation};

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("match_detections");
    for images in [10, 100, 1000] {
        let (dets, gts) = eval_workload(&mut rng(images as u64), images, 3);
        group.bench_with_input(
            BenchmarkId::from_parameter(images),
            &(dets, gts),
            |b, (d, g)| b.iter(|| match_detections(black_box(d), black_box(g), 0.5).unwrap()),
        );
    }
    group.finish();
}

fn ap(c: &mut Criterion) {
    let (dets, gts) = eval_workload(&mut rng(7), 1000, 3);
    let m = match_detections(&dets, &gts, 0.5).unwrap();
    let cls = &m.per_class[0];
    let flags = cls.scored_flags();
    c.bench_function("ap/all_point", |b| {
        b.iter(|| average_precision(black_box(&flags), cls.n_gt, Interpolation::AllPoint))
    });
    c.bench_function("ap/eleven_point", |b| {
        b.iter(|| average_precision(black_box(&flags), cls.n_gt, Interpolation::ElevenPoint))
    });
    c.bench_function("ap/brute_force", |b| {
        b.iter(|| brute_force_ap(black_box(&flags), cls.n_gt))
    });
}

criterion_group!(benches, matching, ap);
criterion_main!(benches);
