//! Comparison grids: one row per image (input, ground truth, predictions...)
//! under a strip of column labels.

use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: Rgb<u8> = Rgb([128, 128, 128]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);
const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;
const ADVANCE: u32 = GLYPH_W + 1;
pub const LABEL_STRIP: u32 = GLYPH_H + 6;

/// 5×7 glyphs, one byte per row, bit 4 is the leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Draw `text` with its top-left corner at `(x, y)`, clipped to `max_width` pixels.
pub fn draw_text(canvas: &mut RgbImage, x: u32, y: u32, text: &str, max_width: u32) {
    let fit = (max_width / ADVANCE) as usize;
    for (i, c) in text.chars().take(fit).enumerate() {
        let ox = x + i as u32 * ADVANCE;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (0x10 >> col) != 0 {
                    let (px, py) = (ox + col, y + row as u32);
                    if px < canvas.width() && py < canvas.height() {
                        canvas.put_pixel(px, py, INK);
                    }
                }
            }
        }
    }
}

/// Pixel width of `text` once drawn.
pub fn text_width(text: &str) -> u32 {
    (text.chars().count() as u32 * ADVANCE).saturating_sub(1)
}

/// Tile rows (missing cells become gray placeholders) under a label strip.
/// Every row is padded to the widest row.
pub fn compose(rows: &[Vec<Option<RgbImage>>], labels: &[String], tile: u32) -> RgbImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(labels.len()) as u32;
    let mut canvas = RgbImage::from_pixel(cols * tile, LABEL_STRIP + rows.len() as u32 * tile, BACKGROUND);
    for (c, label) in labels.iter().enumerate() {
        let x0 = c as u32 * tile;
        let pad = tile.saturating_sub(text_width(label)) / 2;
        draw_text(&mut canvas, x0 + pad, 3, label, tile);
    }
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols as usize {
            let (x0, y0) = (c as u32 * tile, LABEL_STRIP + r as u32 * tile);
            match row.get(c).and_then(Option::as_ref) {
                Some(img) => {
                    let t = resize(img, tile, tile, FilterType::Triangle);
                    for (x, y, p) in t.enumerate_pixels() {
                        canvas.put_pixel(x0 + x, y0 + y, *p);
                    }
                }
                None => {
                    for y in 0..tile {
                        for x in 0..tile {
                            canvas.put_pixel(x0 + x, y0 + y, PLACEHOLDER);
                        }
                    }
                }
            }
        }
    }
    canvas
}

/// Paths of one grid row; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cells: Vec<Option<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub width: u32,
    pub height: u32,
    pub placeholders: usize,
}

/// Load every cell, substitute placeholders for missing or unreadable files,
/// and write the composite PNG to `out`.
pub fn report_grid(rows: &[GridRow], labels: &[String], tile: u32, out: &Path) -> Result<GridSummary> {
    if tile == 0 {
        return Err(Error::Plan("grid tile size must be positive".into()));
    }
    let mut placeholders = 0;
    let loaded: Vec<Vec<Option<RgbImage>>> = rows
        .iter()
        .map(|row| {
            row.cells
                .iter()
                .map(|cell| {
                    let img = cell.as_ref().and_then(|p| match image::open(p) {
                        Ok(img) => Some(img.to_rgb8()),
                        Err(e) => {
                            log::warn!("grid cell {}: {e}", p.display());
                            None
                        }
                    });
                    placeholders += img.is_none() as usize;
                    img
                })
                .collect()
        })
        .collect();
    let canvas = compose(&loaded, labels, tile);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    canvas.save(out).map_err(|source| Error::Image { path: out.to_path_buf(), source })?;
    let cols = loaded.iter().map(Vec::len).max().unwrap_or(0).max(labels.len());
    let padded: usize = loaded.iter().map(|r| cols - r.len()).sum();
    Ok(GridSummary { width: canvas.width(), height: canvas.height(), placeholders: placeholders + padded })
}
