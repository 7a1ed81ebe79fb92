//! COCO instance annotations → binary saliency masks.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u64>),
    Compressed(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoAnnotation {
    pub image_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
}

impl CocoDataset {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Annotation(format!("invalid COCO json: {e}")))
    }

    /// Annotations grouped by image id.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&CocoAnnotation>> {
        let mut out: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }
}

/// Union mask of an image's annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    /// Row-major, values in {0, 1}.
    pub data: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// Instance masks that covered at least one pixel.
    pub valid: usize,
    /// Empty or degenerate instance masks.
    pub skipped: usize,
}

/// Rasterize a closed polygon `[x0, y0, x1, y1, ...]` with the even-odd rule
/// sampled at pixel centers, OR-ing into `out`. Returns the number of pixels set.
pub fn fill_polygon(coords: &[f64], h: usize, w: usize, out: &mut [u8]) -> usize {
    let n = coords.len() / 2;
    if n < 3 {
        return 0;
    }
    let pts: Vec<(f64, f64)> = (0..n).map(|i| (coords[2 * i], coords[2 * i + 1])).collect();
    let mut filled = 0;
    let mut xs = Vec::new();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % n];
            if (y0 > yc) != (y1 > yc) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centers with pair[0] <= x + 0.5 < pair[1]
            let lo = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let hi = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(w);
            for x in lo..hi {
                let px = &mut out[y * w + x];
                filled += (*px == 0) as usize;
                *px = 1;
            }
        }
    }
    filled
}

fn decode_compressed(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = bytes[p]
                .checked_sub(48)
                .ok_or_else(|| Error::Annotation("invalid RLE character".into()))? as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            let more = c & 0x20 != 0;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p >= bytes.len() {
                return Err(Error::Annotation("truncated RLE string".into()));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::Annotation("negative RLE run".into())))
        .collect()
}

/// Decode column-major run lengths (starting with a zero run) into a row-major mask.
pub fn decode_rle(counts: &RleCounts, h: usize, w: usize) -> Result<Vec<u8>> {
    let runs = match counts {
        RleCounts::Raw(v) => v.clone(),
        RleCounts::Compressed(s) => decode_compressed(s)?,
    };
    let total: u64 = runs.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::Annotation(format!("RLE covers {total} pixels, mask has {}", h * w)));
    }
    let mut out = vec![0u8; h * w];
    let mut pos = 0usize;
    for (i, &r) in runs.iter().enumerate() {
        let r = r as usize;
        if i % 2 == 1 {
            for k in pos..pos + r {
                let (col, row) = (k / h, k % h);
                out[row * w + col] = 1;
            }
        }
        pos += r;
    }
    Ok(out)
}

/// Union of all instance masks of one image. Degenerate or empty instances
/// are counted in `skipped`.
pub fn binarize_annotations(anns: &[&CocoAnnotation], h: usize, w: usize) -> BinaryMask {
    let mut data = vec![0u8; h * w];
    let (mut valid, mut skipped) = (0, 0);
    for ann in anns {
        let mut inst = vec![0u8; h * w];
        let area = match &ann.segmentation {
            Segmentation::Polygons(polys) => polys
                .iter()
                .filter(|p| p.len() >= 6 && p.len() % 2 == 0)
                .map(|p| fill_polygon(p, h, w, &mut inst))
                .sum::<usize>(),
            Segmentation::Rle { counts, size } => {
                if size[0] != h || size[1] != w {
                    0
                } else {
                    match decode_rle(counts, h, w) {
                        Ok(m) => {
                            inst = m;
                            inst.iter().map(|&v| v as usize).sum()
                        }
                        Err(_) => 0,
                    }
                }
            }
        };
        if area == 0 {
            skipped += 1;
            continue;
        }
        valid += 1;
        for (d, s) in data.iter_mut().zip(&inst) {
            *d |= s;
        }
    }
    BinaryMask { data, height: h, width: w, valid, skipped }
}
