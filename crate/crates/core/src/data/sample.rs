//! Decoded training samples, resizing and flips.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::mask::{binarize, derive_contour};
use crate::error::{Error, Result};
use crate::nn::resize_plane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Hflip,
    Vflip,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::None, Augmentation::Hflip, Augmentation::Vflip];
}

/// One image with its saliency and contour maps, all planar `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencySample {
    /// `(3, H, W)`
    pub image: Vec<f32>,
    /// `(1, H, W)`
    pub gt: Vec<f32>,
    /// `(1, H, W)`, binary
    pub contour: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub id: String,
}

/// Flip every plane of a `(C, H, W)` buffer.
pub fn flip_planes(data: &[f32], h: usize, w: usize, aug: Augmentation) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0; data.len()];
    for (c, src) in data.chunks_exact(plane).enumerate() {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match aug {
                    Augmentation::None => (y, x),
                    Augmentation::Hflip => (y, w - 1 - x),
                    Augmentation::Vflip => (h - 1 - y, x),
                };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Apply the same flip to image, saliency map and contour.
pub fn augment(sample: &SaliencySample, aug: Augmentation) -> SaliencySample {
    let (h, w) = (sample.height, sample.width);
    SaliencySample {
        image: flip_planes(&sample.image, h, w, aug),
        gt: flip_planes(&sample.gt, h, w, aug),
        contour: flip_planes(&sample.contour, h, w, aug),
        height: h,
        width: w,
        id: sample.id.clone(),
    }
}

pub fn rgb_to_planes(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    out
}

pub fn gray_to_plane(img: &GrayImage) -> Vec<f32> {
    img.pixels().map(|p| p[0] as f32 / 255.0).collect()
}

/// Quantize a `[0, 1]` plane to 8 bits.
pub fn plane_to_gray(data: &[f32], h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = data[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Resize to `size` (bilinear), clamp the saliency map and rebuild the
/// contour from the resized map binarized at 0.5.
pub fn prepare(image: &RgbImage, gt: &GrayImage, size: (usize, usize), id: &str) -> Result<SaliencySample> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if (gt.width() as usize, gt.height() as usize) != (w, h) {
        return Err(Error::Shape(format!(
            "{id}: image is {w}x{h}, ground truth is {}x{}",
            gt.width(),
            gt.height()
        )));
    }
    let (oh, ow) = size;
    let planes = rgb_to_planes(image);
    let mut img = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        img.extend(resize_plane(&planes[c * h * w..(c + 1) * h * w], h, w, oh, ow));
    }
    let gt: Vec<f32> = resize_plane(&gray_to_plane(gt), h, w, oh, ow)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let contour = derive_contour(&binarize(&gt), oh, ow);
    Ok(SaliencySample { image: img, gt, contour, height: oh, width: ow, id: id.to_string() })
}

pub fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8())
}

pub fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8())
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
