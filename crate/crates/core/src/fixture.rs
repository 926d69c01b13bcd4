//! Synthetic datasets for desk-scale runs.
//!
//! Frames are flat gray images with one solid rectangle per object, painted
//! in a colour that encodes the object's class. Crops of such frames carry
//! their class in their pixels, which is what lets the oracle classifier
//! recover it without any side channel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::annotation::{write_label_file, ClassMap, DatasetManifest, Frame};
use crate::classmodel::{ObjectClass, NUM_CLASSES};
use crate::geometry::{to_pixel_rect, BoundingBox};
use crate::imaging;

pub const BACKGROUND: Rgb<u8> = Rgb([96, 96, 96]);

pub fn class_color(class: ObjectClass) -> Rgb<u8> {
    let i = class.index() as u8;
    Rgb([20 + i * 19, 240 - i * 17, 30 + (i % 4) * 60])
}

pub fn class_from_color(px: &Rgb<u8>) -> Option<ObjectClass> {
    ObjectClass::all().find(|c| class_color(*c) == *px)
}

/// Class whose palette colour covers the most pixels; lowest index on ties.
pub fn dominant_class(img: &RgbImage) -> Option<ObjectClass> {
    let mut counts = [0usize; NUM_CLASSES];
    for px in img.pixels() {
        if let Some(c) = class_from_color(px) {
            counts[c.index()] += 1;
        }
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
    (n > 0).then(|| ObjectClass::from_index(best).expect("index in range"))
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub frames: usize,
    pub objects_per_frame: usize,
    pub width: u32,
    pub height: u32,
    /// Frames are split evenly between these tags, first half first.
    pub splits: Vec<String>,
    /// Offset into the class cycle, so two fixtures can differ in content.
    pub class_offset: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            frames: 10,
            objects_per_frame: 3,
            width: 160,
            height: 96,
            splits: vec!["v1".into(), "v2".into()],
            class_offset: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub labels_dir: PathBuf,
    pub manifest: DatasetManifest,
    /// Ground truth per image, in label-file line order.
    pub objects: BTreeMap<String, Vec<(ObjectClass, BoundingBox)>>,
}

impl Fixture {
    pub fn object_count(&self) -> usize {
        self.objects.values().map(Vec::len).sum()
    }
}

/// Writes frames, label files and a manifest under `root`.
///
/// Objects sit in non-overlapping slots along a frame's width. Within each
/// split, classes cycle through all 12 in index order, so any split with at
/// least 12 objects covers every class.
pub fn generate(root: &Path, spec: &FixtureSpec) -> std::io::Result<Fixture> {
    let frames_dir = root.join("frames");
    let labels_dir = root.join("labels");
    fs::create_dir_all(&frames_dir)?;
    fs::create_dir_all(&labels_dir)?;

    let n_splits = spec.splits.len().max(1);
    let per_split = spec.frames.div_ceil(n_splits);
    let slot_w = spec.width / spec.objects_per_frame.max(1) as u32;
    let class_map = ClassMap::default();

    let mut frames = Vec::new();
    let mut objects = BTreeMap::new();
    let mut split_counters = vec![spec.class_offset; n_splits];

    for f in 0..spec.frames {
        let image_id = format!("frame{f:03}");
        let split_idx = (f / per_split).min(n_splits - 1);
        let split = spec
            .splits
            .get(split_idx)
            .cloned()
            .unwrap_or_else(|| "v1".into());
        let mut img = RgbImage::from_pixel(spec.width, spec.height, BACKGROUND);
        let mut rows = Vec::new();
        for k in 0..spec.objects_per_frame {
            let class = ObjectClass::from_index(split_counters[split_idx] % NUM_CLASSES)
                .expect("index in range");
            split_counters[split_idx] += 1;
            // pixel rectangle inside slot k, height varies with the frame
            let x0 = k as u32 * slot_w + 2 + (f as u32 % 3);
            let x1 = (k as u32 + 1) * slot_w - 2;
            let y0 = 4 + ((f + k) as u32 % 5) * 2;
            let y1 = spec.height - 4 - (k as u32 % 3) * 3;
            let (w, h) = (spec.width as f64, spec.height as f64);
            let bbox = BoundingBox::new(
                (x0 + x1) as f64 / 2.0 / w,
                (y0 + y1) as f64 / 2.0 / h,
                (x1 - x0) as f64 / w,
                (y1 - y0) as f64 / h,
            )
            .expect("fixture box is valid");
            let rect =
                to_pixel_rect(&bbox, spec.width, spec.height).expect("fixture box inside frame");
            for y in rect.y_min..rect.y_max {
                for x in rect.x_min..rect.x_max {
                    img.put_pixel(x, y, class_color(class));
                }
            }
            rows.push((class, bbox));
        }
        let path = frames_dir.join(format!("{image_id}.png"));
        imaging::save_png(&img, &path).map_err(std::io::Error::other)?;
        write_label_file(
            &labels_dir.join(format!("{image_id}.txt")),
            &rows,
            &class_map,
        )?;
        frames.push(Frame {
            image_id: image_id.clone(),
            path,
            width: spec.width,
            height: spec.height,
            split,
        });
        objects.insert(image_id, rows);
    }

    let manifest = DatasetManifest::new(frames).map_err(std::io::Error::other)?;
    let manifest_path = root.join("manifest.csv");
    manifest
        .save(&manifest_path)
        .map_err(std::io::Error::other)?;
    Ok(Fixture {
        root: root.to_path_buf(),
        manifest_path,
        labels_dir,
        manifest,
        objects,
    })
}
