//! Saliency-map export: resize, forward, sigmoid of the final head, resize back, 8-bit PNG.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::sample::{open_rgb, plane_to_gray, rgb_to_planes, save_gray};
use crate::error::{Error, Result};
use crate::model::{checkpoint, SodaNet};
use crate::nn::{resize_bilinear, resize_plane};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Network input for one image: `(1, 3, H, W)` at the model resolution.
pub fn image_tensor(img: &RgbImage, size: (usize, usize), dtype: DType) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (oh, ow) = size;
    let planes = rgb_to_planes(img);
    let mut data = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        data.extend(resize_plane(&planes[c * h * w..(c + 1) * h * w], h, w, oh, ow));
    }
    Ok(Tensor::from_vec(data, (1, 3, oh, ow), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Final-head logits of one image, upsampled to the model input size: `(1, 1, H, W)`.
pub fn final_logits(net: &SodaNet, img: &RgbImage) -> Result<Tensor> {
    let x = image_tensor(img, net.config().input_size, net.store().dtype())?;
    let out = net.forward(&x, false)?;
    out.upsampled(out.final_head)
}

/// Quantized saliency map at `native` `(height, width)` from `(1, 1, h, w)` logits.
pub fn logits_to_map(logits: &Tensor, native: (usize, usize)) -> Result<GrayImage> {
    let (_, _, h, w) = logits.dims4()?;
    let prob = candle_nn::ops::sigmoid(logits)?;
    let prob = if (h, w) == native { prob } else { resize_bilinear(&prob, native.0, native.1)? };
    let plane: Vec<f32> = prob.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { site: "prediction map".into() });
    }
    Ok(plane_to_gray(&plane, native.0, native.1))
}

/// Saliency map of one image at its own resolution.
pub fn predict_image(net: &SodaNet, img: &RgbImage) -> Result<GrayImage> {
    let native = (img.height() as usize, img.width() as usize);
    logits_to_map(&final_logits(net, img)?, native)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

/// Image files directly inside `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Write `<stem>.png` into `out_dir` for every image in `images_dir`.
/// Unreadable images are logged and skipped.
pub fn predict_dir(net: &SodaNet, images_dir: &Path, out_dir: &Path) -> Result<PredictSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary = PredictSummary::default();
    for path in list_images(images_dir)? {
        let img = match open_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.skipped.push(path);
                continue;
            }
        };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = out_dir.join(format!("{stem}.png"));
        save_gray(&predict_image(net, &img)?, &out)?;
        summary.written.push(out);
    }
    Ok(summary)
}

pub fn predict_checkpoint(checkpoint: &Path, images_dir: &Path, out_dir: &Path) -> Result<PredictSummary> {
    let net = checkpoint::load(checkpoint, None)?;
    predict_dir(&net, images_dir, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use image::Rgb;

    fn net() -> SodaNet {
        let mut cfg = ModelConfig::toy();
        cfg.input_size = (16, 16);
        SodaNet::new(cfg, 5).unwrap()
    }

    fn picture(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 13 % 256) as u8, (y * 29 % 256) as u8, ((x + y) * 7 % 256) as u8]))
    }

    #[test]
    fn output_keeps_native_size_and_is_repeatable() {
        let n = net();
        let img = picture(23, 17);
        let a = predict_image(&n, &img).unwrap();
        assert_eq!(a.dimensions(), (23, 17));
        assert_eq!(a, predict_image(&n, &img).unwrap());
    }

    #[test]
    fn negated_logits_invert_the_map_within_one_level() {
        let n = net();
        let logits = final_logits(&n, &picture(20, 12)).unwrap();
        let a = logits_to_map(&logits, (12, 20)).unwrap();
        let b = logits_to_map(&logits.neg().unwrap(), (12, 20)).unwrap();
        for (p, q) in a.pixels().zip(b.pixels()) {
            assert!((255 - p[0] as i32 - q[0] as i32).abs() <= 1);
        }
    }

    #[test]
    fn directory_export_skips_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let (src, out) = (dir.path().join("in"), dir.path().join("out"));
        std::fs::create_dir_all(&src).unwrap();
        picture(10, 10).save(src.join("a.png")).unwrap();
        std::fs::write(src.join("b.jpg"), b"not an image").unwrap();
        std::fs::write(src.join("notes.txt"), b"ignored").unwrap();
        let s = predict_dir(&net(), &src, &out).unwrap();
        assert_eq!(s.written, vec![out.join("a.png")]);
        assert_eq!(s.skipped, vec![src.join("b.jpg")]);
    }
}
