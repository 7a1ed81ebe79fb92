//! Corpus builders: binarized COCO for pretraining, DUTS-style folders for
//! fine-tuning.

use std::path::{Path, PathBuf};

use image::GrayImage;

use super::coco::{binarize_annotations, CocoDataset};
use super::manifest::{DatasetManifest, Phase, SourceItem};
use super::mask::{binarize, derive_contour};
use super::sample::{gray_to_plane, open_gray, plane_to_gray, save_gray};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    pub sources: usize,
    pub entries: usize,
    /// Images left out (no valid mask, missing or unreadable files).
    pub skipped_images: usize,
    /// Degenerate or empty instance masks.
    pub skipped_instances: usize,
    pub manifest: PathBuf,
}

fn write_masks(gt: &[f32], h: usize, w: usize, stem: &str, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let gt_path = out.join("gt").join(format!("{stem}.png"));
    let contour_path = out.join("contour").join(format!("{stem}.png"));
    save_gray(&plane_to_gray(gt, h, w), &gt_path)?;
    save_gray(&plane_to_gray(&derive_contour(&binarize(gt), h, w), h, w), &contour_path)?;
    Ok((gt_path, contour_path))
}

/// Binarize every annotated image of a COCO instances file and write a
/// pretraining manifest to `out/manifest.jsonl`.
pub fn build_coco(annotations: &Path, images: &Path, out: &Path) -> Result<BuildReport> {
    let text = std::fs::read_to_string(annotations)?;
    let ds = CocoDataset::parse(&text)?;
    let groups = ds.by_image();
    let mut report = BuildReport::default();
    let mut sources = Vec::new();
    for img in &ds.images {
        let Some(anns) = groups.get(&img.id) else { continue };
        let mask = binarize_annotations(anns, img.height, img.width);
        report.skipped_instances += mask.skipped;
        let image_path = images.join(&img.file_name);
        if mask.valid == 0 || !image_path.is_file() {
            log::warn!("skipping {}: {} valid masks", img.file_name, mask.valid);
            report.skipped_images += 1;
            continue;
        }
        let stem = Path::new(&img.file_name)
            .file_stem()
            .map_or_else(|| img.id.to_string(), |s| s.to_string_lossy().into_owned());
        let gt: Vec<f32> = mask.data.iter().map(|&v| v as f32).collect();
        let (gt, contour) = write_masks(&gt, img.height, img.width, &stem, out)?;
        sources.push(SourceItem { image: image_path, gt, contour });
    }
    if report.skipped_instances > 0 {
        log::warn!("{} empty or degenerate instance masks skipped", report.skipped_instances);
    }
    finish(sources, Phase::Pretrain, "coco", out, report)
}

fn find_dir(root: &Path, suffixes: &[&str]) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.into_iter().find(|p| {
        let name = p.file_name().map(|n| n.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
        suffixes.iter().any(|s| name.ends_with(s))
    })
}

fn files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// Pair `*Image` and `*Mask` folders under `root` by file stem and write a
/// fine-tuning manifest to `out/manifest.jsonl`.
pub fn build_duts(root: &Path, out: &Path) -> Result<BuildReport> {
    let image_dir = find_dir(root, &["image", "images", "imgs"])
        .ok_or_else(|| Error::Manifest(format!("{}: no image folder", root.display())))?;
    let mask_dir = find_dir(root, &["mask", "masks", "gt"])
        .ok_or_else(|| Error::Manifest(format!("{}: no mask folder", root.display())))?;
    let masks = files(&mask_dir)?;
    let mut report = BuildReport::default();
    let mut sources = Vec::new();
    for image in files(&image_dir)? {
        let stem = image.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
        let Some(gt_src) = masks.iter().find(|m| m.file_stem() == Some(stem.as_os_str())) else {
            log::warn!("{}: no matching mask", image.display());
            report.skipped_images += 1;
            continue;
        };
        let gt_img: GrayImage = match open_gray(gt_src) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("{e}");
                report.skipped_images += 1;
                continue;
            }
        };
        let (w, h) = (gt_img.width() as usize, gt_img.height() as usize);
        let stem = stem.to_string_lossy().into_owned();
        let (gt, contour) = write_masks(&gray_to_plane(&gt_img), h, w, &stem, out)?;
        sources.push(SourceItem { image, gt, contour });
    }
    finish(sources, Phase::Finetune, "duts", out, report)
}

fn finish(sources: Vec<SourceItem>, phase: Phase, name: &str, out: &Path, mut report: BuildReport) -> Result<BuildReport> {
    let manifest = DatasetManifest::expand(&sources, phase, name);
    let path = out.join("manifest.jsonl");
    manifest.write(&path)?;
    report.sources = sources.len();
    report.entries = manifest.len();
    report.manifest = path;
    Ok(report)
}
