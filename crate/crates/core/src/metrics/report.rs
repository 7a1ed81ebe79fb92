//! Dataset evaluation and report writers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fmax::FMaxAccumulator;
use super::measures::{e_measure, mae, s_measure, weighted_f};
use super::pair::EvalPair;
use crate::data::sample::{gray_to_plane, open_gray};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::nn::resize_plane;

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub n_images: usize,
    pub f_max: f64,
    pub mae: f64,
    pub s_m: f64,
    pub e_m: f64,
    pub f_w: f64,
    /// Images without positives, left out of the precision/recall means.
    pub skipped_empty_gt: usize,
    /// Ground truths with no matching prediction file.
    pub missing_predictions: usize,
    /// Dataset-mean `(precision, recall)` per threshold `0..=255`.
    pub f_curve: Vec<(f64, f64)>,
}

/// Running aggregate: per-image means for MAE/S/E/Fw, precision/recall means for F_max.
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    fmax: FMaxAccumulator,
    sums: [f64; 4],
    n: usize,
    missing: usize,
}

impl Evaluator {
    pub fn add(&mut self, pair: &EvalPair) {
        self.fmax.add(pair);
        for (s, v) in self.sums.iter_mut().zip([mae(pair), s_measure(pair), e_measure(pair), weighted_f(pair)]) {
            *s += v;
        }
        self.n += 1;
    }

    pub fn count_missing(&mut self) {
        self.missing += 1;
    }

    pub fn finish(&self, dataset: &str) -> MetricReport {
        let f = self.fmax.finish();
        let n = self.n.max(1) as f64;
        MetricReport {
            dataset: dataset.to_string(),
            n_images: self.n,
            f_max: f.value,
            mae: self.sums[0] / n,
            s_m: self.sums[1] / n,
            e_m: self.sums[2] / n,
            f_w: self.sums[3] / n,
            skipped_empty_gt: f.skipped_empty,
            missing_predictions: self.missing,
            f_curve: f.curve,
        }
    }
}

pub fn evaluate_pairs(pairs: &[EvalPair], dataset: &str) -> MetricReport {
    let mut ev = Evaluator::default();
    pairs.iter().for_each(|p| ev.add(p));
    ev.finish(dataset)
}

/// Load a prediction PNG and its ground truth, resizing the prediction to the
/// ground truth's native resolution.
pub fn load_pair(pred: &Path, gt: &Path) -> Result<EvalPair> {
    let gt_img = open_gray(gt)?;
    let pred_img = open_gray(pred)?;
    let (h, w) = (gt_img.height() as usize, gt_img.width() as usize);
    let (ph, pw) = (pred_img.height() as usize, pred_img.width() as usize);
    let mut p = gray_to_plane(&pred_img);
    if (ph, pw) != (h, w) {
        p = resize_plane(&p, ph, pw, h, w);
    }
    let pred = p.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect();
    EvalPair::new(pred, &gray_to_plane(&gt_img), h, w)
}

fn find_prediction(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "bmp"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn evaluate_items(items: impl Iterator<Item = (String, PathBuf)>, pred_dir: &Path, dataset: &str) -> Result<MetricReport> {
    let mut ev = Evaluator::default();
    for (stem, gt) in items {
        let Some(pred) = find_prediction(pred_dir, &stem) else {
            log::warn!("no prediction for {stem}");
            ev.count_missing();
            continue;
        };
        match load_pair(&pred, &gt) {
            Ok(pair) => ev.add(&pair),
            Err(e) => {
                log::warn!("skipping {stem}: {e}");
                ev.count_missing();
            }
        }
    }
    if ev.n == 0 {
        return Err(Error::Manifest(format!("{dataset}: no prediction/ground-truth pairs found")));
    }
    Ok(ev.finish(dataset))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pair every ground-truth file in `gt_dir` with the same-stem prediction in `pred_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, dataset: &str) -> Result<MetricReport> {
    let mut gts: Vec<PathBuf> = std::fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    gts.sort();
    evaluate_items(gts.into_iter().map(|g| (stem(&g), g)), pred_dir, dataset)
}

/// Evaluate predictions named after each manifest entry's image stem.
pub fn evaluate_dataset(manifest: &DatasetManifest, pred_dir: &Path) -> Result<MetricReport> {
    let items = manifest.entries.iter().map(|e| (stem(&e.image), e.gt.clone()));
    evaluate_items(items, pred_dir, &manifest.source)
}

pub const COLUMNS: [&str; 5] = ["F_max", "MAE", "S_m", "E_m", "F_w"];

fn row_values(r: &MetricReport) -> [f64; 5] {
    [r.f_max, r.mae, r.s_m, r.e_m, r.f_w]
}

pub fn to_markdown(reports: &[MetricReport]) -> String {
    let mut s = format!("| Dataset | {} | Images |\n|---|{}---|\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
    for r in reports {
        let vals: Vec<String> = row_values(r).iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(s, "| {} | {} | {} |", r.dataset, vals.join(" | "), r.n_images);
    }
    s
}

pub fn to_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("dataset,{},n_images\n", COLUMNS.join(","));
    for r in reports {
        let vals: Vec<String> = row_values(r).iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{},{},{}", r.dataset, vals.join(","), r.n_images);
    }
    s
}

/// Write reports as JSON, Markdown or CSV according to the file extension.
pub fn write_report(reports: &[MetricReport], path: &Path) -> Result<()> {
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    let text = match ext.as_str() {
        "json" => serde_json::to_string_pretty(reports)?,
        "md" => to_markdown(reports),
        "csv" => to_csv(reports),
        other => return Err(Error::Config(format!("unknown report format '.{other}' (json, md or csv)"))),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
