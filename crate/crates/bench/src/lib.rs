//! Seeded workload generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vodpipe_core::eval::GroundTruth;
use vodpipe_core::{BoundingBox, Detection, ObjectClass, NUM_CLASSES};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(0.02..0.3);
    let h = rng.gen_range(0.02..0.3);
    BoundingBox::new(
        rng.gen_range(w / 2.0..1.0 - w / 2.0),
        rng.gen_range(h / 2.0..1.0 - h / 2.0),
        w,
        h,
    )
    .unwrap()
}

/// `n` classified detections on a single image, clustered so NMS has work.
pub fn clustered_detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    let centers: Vec<BoundingBox> = (0..(n / 8).max(1)).map(|_| random_box(rng)).collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.gen_range(0..centers.len())];
            let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.01..0.01);
            let bbox = BoundingBox::new(
                (c.cx + jitter(rng)).clamp(0.0, 1.0),
                (c.cy + jitter(rng)).clamp(0.0, 1.0),
                c.w,
                c.h,
            )
            .unwrap();
            let class = ObjectClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap();
            Detection::new("frame", bbox, rng.gen(), class.group())
                .unwrap()
                .with_class(class)
        })
        .collect()
}

/// Ground truth spread over `images` frames, plus detections of which about
/// two thirds sit on a ground-truth box.
pub fn eval_workload(
    rng: &mut ChaCha8Rng,
    images: usize,
    per_image: usize,
) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut gts = Vec::with_capacity(images * per_image);
    let mut dets = Vec::new();
    for i in 0..images {
        let image_id = format!("frame{i:05}");
        for _ in 0..per_image {
            let class = ObjectClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap();
            let bbox = random_box(rng);
            gts.push(GroundTruth {
                image_id: image_id.clone(),
                class,
                bbox,
            });
            if rng.gen_bool(2.0 / 3.0) {
                dets.push(
                    Detection::new(&image_id, bbox, rng.gen(), class.group())
                        .unwrap()
                        .with_class(class),
                );
            }
            if rng.gen_bool(1.0 / 3.0) {
                let wrong = ObjectClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap();
                dets.push(
                    Detection::new(&image_id, random_box(rng), rng.gen(), wrong.group())
                        .unwrap()
                        .with_class(wrong),
                );
            }
        }
    }
    (dets, gts)
}
