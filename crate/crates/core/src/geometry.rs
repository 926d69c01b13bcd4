//! Box representations, IoU and greedy non-maximum suppression.
//!
//! The canonical box is normalized center format `(cx, cy, w, h)`, the same
//! convention as the label files. Pixel corners are a derived view used for
//! cropping. IoU on normalized boxes equals IoU on the unrounded pixel boxes,
//! since scaling each axis by a constant scales every area by the same factor.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classmodel::{ObjectClass, VehicleGroup};

pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({cx}, {cy}, {w}, {h}): centers must lie in [0,1] and sizes in (0,1]")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("box {0:?} collapses to zero area inside a {1}x{2} image")]
    DegenerateBox(BoundingBox, u32, u32),
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("score {0} outside [0,1]")]
    InvalidScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let size = |v: f64| v > 0.0 && v <= 1.0;
        if unit(cx) && unit(cy) && size(w) && size(h) {
            Ok(Self { cx, cy, w, h })
        } else {
            Err(GeometryError::InvalidBox { cx, cy, w, h })
        }
    }

    /// Normalized corners `(x_min, y_min, x_max, y_max)`; may extend past [0,1].
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.corners();
        let [bx0, by0, bx1, by1] = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Total order used wherever ties must be broken deterministically.
    pub fn canonical_cmp(&self, other: &BoundingBox) -> Ordering {
        self.cx
            .total_cmp(&other.cx)
            .then(self.cy.total_cmp(&other.cy))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            cx: f64,
            cy: f64,
            w: f64,
            h: f64,
        }
        let r = Raw::deserialize(deserializer)?;
        BoundingBox::new(r.cx, r.cy, r.w, r.h).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }
}

/// Rounds the box corners to pixels (half away from zero) and clamps them to
/// the image. A box that clamps to zero area is rejected.
pub fn to_pixel_rect(b: &BoundingBox, img_w: u32, img_h: u32) -> Result<PixelRect, GeometryError> {
    if img_w == 0 || img_h == 0 {
        return Err(GeometryError::EmptyImage(img_w, img_h));
    }
    let [x0, y0, x1, y1] = b.corners();
    let px = |v: f64, limit: u32| (v * limit as f64).round().clamp(0.0, limit as f64) as u32;
    let rect = PixelRect {
        x_min: px(x0, img_w),
        y_min: px(y0, img_h),
        x_max: px(x1, img_w),
        y_max: px(y1, img_h),
    };
    if rect.x_min >= rect.x_max || rect.y_min >= rect.y_max {
        return Err(GeometryError::DegenerateBox(*b, img_w, img_h));
    }
    Ok(rect)
}

pub fn iou(a: &PixelRect, b: &PixelRect) -> f64 {
    let iw = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min)) as u64;
    let ih = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min)) as u64;
    let inter = iw * ih;
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// A scored box on one image. `object_class` is filled in once the crop has
/// been classified; before that only the detector group is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub object_class: Option<ObjectClass>,
    pub group: VehicleGroup,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        bbox: BoundingBox,
        score: f64,
        group: VehicleGroup,
    ) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self {
            image_id: image_id.into(),
            bbox,
            score,
            object_class: None,
            group,
        })
    }

    pub fn with_class(mut self, class: ObjectClass) -> Self {
        self.object_class = Some(class);
        self
    }
}

/// Score descending, then canonical box order ascending.
pub fn rank_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.canonical_cmp(&b.bbox))
}

/// Greedy NMS over detections of a single image.
///
/// Detections are visited in [`rank_cmp`] order; one is kept iff its IoU with
/// every already-kept detection is below `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    debug_assert!(dets.windows(2).all(|w| w[0].image_id == w[1].image_id));
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_cmp(a, b));

    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for det in order {
        if kept.iter().all(|k| k.bbox.iou(&det.bbox) < iou_threshold) {
            kept.push(det.clone());
        }
    }
    kept
}
