//! Procedural image/mask pairs for smoke runs and tests.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::SourceItem;
use super::mask::derive_contour;
use super::sample::{plane_to_gray, save_gray};
use crate::error::{Error, Result};

/// A textured background with one or two bright ellipses; the mask marks the ellipses.
pub fn synthetic_pair(size: usize, rng: &mut impl Rng) -> (RgbImage, Vec<f32>) {
    let bg = [rng.random_range(0..90u8), rng.random_range(0..90u8), rng.random_range(0..90u8)];
    let fg = [rng.random_range(150..=255u8), rng.random_range(150..=255u8), rng.random_range(150..=255u8)];
    let s = size as f32;
    let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(1..=2))
        .map(|_| {
            (
                rng.random_range(0.3 * s..0.7 * s),
                rng.random_range(0.3 * s..0.7 * s),
                rng.random_range(0.12 * s..0.28 * s),
                rng.random_range(0.12 * s..0.28 * s),
            )
        })
        .collect();
    let mut mask = vec![0.0f32; size * size];
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = blobs
                .iter()
                .any(|&(cx, cy, rx, ry)| ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0);
            let base = if inside { fg } else { bg };
            let noise: i16 = rng.random_range(-20..=20);
            let c = base.map(|v| (v as i16 + noise).clamp(0, 255) as u8);
            img.put_pixel(x as u32, y as u32, Rgb(c));
            mask[y * size + x] = inside as u8 as f32;
        }
    }
    (img, mask)
}

/// Write `count` synthetic pairs under `dir/{images,gt,contour}`.
pub fn write_synthetic(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<SourceItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir.join("images"))?;
    (0..count)
        .map(|i| {
            let (img, mask) = synthetic_pair(size, &mut rng);
            let image = dir.join("images").join(format!("{i:05}.png"));
            img.save(&image).map_err(|source| Error::Image { path: image.clone(), source })?;
            let gt = dir.join("gt").join(format!("{i:05}.png"));
            save_gray(&plane_to_gray(&mask, size, size), &gt)?;
            let contour = dir.join("contour").join(format!("{i:05}.png"));
            save_gray(&plane_to_gray(&derive_contour(&mask, size, size), size, size), &contour)?;
            Ok(SourceItem { image, gt, contour })
        })
        .collect()
}
