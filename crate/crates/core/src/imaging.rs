//! Thin wrappers over the `image` crate for frame loading and crop output.

use std::fs;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::geometry::PixelRect;

pub fn load_rgb(path: &Path) -> Result<RgbImage, String> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| format!("{}: {e}", path.display()))
}

pub fn image_dims(path: &Path) -> Result<(u32, u32), String> {
    image::image_dimensions(path).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn crop(img: &RgbImage, rect: &PixelRect) -> RgbImage {
    image::imageops::crop_imm(img, rect.x_min, rect.y_min, rect.width(), rect.height()).to_image()
}

/// Writes a lossless PNG, creating parent directories as needed.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| format!("{}: {e}", path.display()))
}
