//! Per-image measures: MAE, structure measure, enhanced-alignment measure and
//! weighted F-measure.

use super::pair::EvalPair;

const EPS: f64 = f64::EPSILON;
pub const S_ALPHA: f64 = 0.5;
pub const FW_SIGMA: f64 = 5.0;
pub const FW_KERNEL: usize = 7;

pub fn mae(pair: &EvalPair) -> f64 {
    let sum: f64 = pair.pred.iter().zip(&pair.gt).map(|(&p, &g)| (p - g as u8 as f64).abs()).sum();
    sum / pair.len() as f64
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mean, std) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(pair: &EvalPair) -> f64 {
    let u = pair.positives() as f64 / pair.len() as f64;
    let it = || pair.pred.iter().zip(&pair.gt);
    let fg = object_similarity(it().filter(|(_, &g)| g).map(|(&p, _)| p));
    let bg = object_similarity(it().filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p));
    u * fg + (1.0 - u) * bg
}

/// Centroid of the foreground as exclusive split indices `(x, y)`, rounding half to even.
fn split_point(pair: &EvalPair) -> (usize, usize) {
    let (h, w) = (pair.height, pair.width);
    let n = pair.positives();
    let (cx, cy) = if n == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, _) in pair.gt.iter().enumerate().filter(|(_, &g)| g) {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
        }
        ((sx / n as f64).round_ties_even(), (sy / n as f64).round_ties_even())
    };
    ((cx as usize + 1).min(w), (cy as usize + 1).min(h))
}

/// SSIM-style similarity of one rectangular block.
fn block_ssim(pair: &EvalPair, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let n = rows.len() * cols.len();
    if n == 0 {
        return 0.0;
    }
    let w = pair.width;
    let idx: Vec<usize> = rows.flat_map(|r| cols.clone().map(move |c| r * w + c)).collect();
    let x = idx.iter().map(|&i| pair.pred[i]).sum::<f64>() / n as f64;
    let y = idx.iter().map(|&i| pair.gt[i] as u8 as f64).sum::<f64>() / n as f64;
    let denom = (n.max(2) - 1) as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (dx, dy) = (pair.pred[i] - x, pair.gt[i] as u8 as f64 - y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pair: &EvalPair) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let (x, y) = split_point(pair);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block_ssim(pair, 0..y, 0..x)
        + w2 * block_ssim(pair, 0..y, x..w)
        + w3 * block_ssim(pair, y..h, 0..x)
        + w4 * block_ssim(pair, y..h, x..w)
}

/// Structure measure: object- and region-aware similarity, `alpha = 0.5`.
pub fn s_measure(pair: &EvalPair) -> f64 {
    let y = pair.positives() as f64 / pair.len() as f64;
    let mean_pred = pair.pred.iter().sum::<f64>() / pair.len() as f64;
    if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        (S_ALPHA * s_object(pair) + (1.0 - S_ALPHA) * s_region(pair)).clamp(0.0, 1.0)
    }
}

/// Enhanced-alignment measure with the adaptive threshold `min(2 * mean, 1)`.
pub fn e_measure(pair: &EvalPair) -> f64 {
    let n = pair.len();
    let mean_pred = pair.pred.iter().sum::<f64>() / n as f64;
    let threshold = (2.0 * mean_pred).min(1.0);
    let fg: Vec<bool> = pair.pred.iter().map(|&p| p >= threshold && p > 0.0).collect();
    let gt_fg = pair.positives();
    let pred_fg = fg.iter().filter(|&&f| f).count();
    let sum = if gt_fg == 0 {
        (n - pred_fg) as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let tp = fg.iter().zip(&pair.gt).filter(|(&f, &g)| f && g).count();
        let fp = pred_fg - tp;
        let fn_ = gt_fg - tp;
        let tn = n - pred_fg - fn_;
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let enhanced = |a: f64, b: f64| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0
        };
        tp as f64 * enhanced(1.0 - mp, 1.0 - mg)
            + fp as f64 * enhanced(1.0 - mp, -mg)
            + fn_ as f64 * enhanced(-mp, 1.0 - mg)
            + tn as f64 * enhanced(-mp, -mg)
    };
    sum / n as f64
}

/// Resolve every position of one line to its nearest feature, given the
/// features already nearest within the orthogonal lines. `axis` is the
/// coordinate that varies along the line, `fixed` the other coordinate.
/// Ties keep the candidate met first along the line.
fn voronoi_line(line: &mut [Option<[i64; 2]>], axis: usize, fixed: i64) {
    let other = 1 - axis;
    let feats: Vec<Option<[i64; 2]>> = line.to_vec();
    let off = |p: [i64; 2]| (p[other] - fixed).pow(2);
    let mut hull: Vec<[i64; 2]> = Vec::with_capacity(line.len());
    for f in feats.iter().flatten() {
        while hull.len() >= 2 {
            let (u, v) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let a = v[axis] - u[axis];
            let b = f[axis] - v[axis];
            let c = a + b;
            if c * off(v) - b * off(u) - a * off(*f) - a * b * c <= 0 {
                break;
            }
            hull.pop();
        }
        hull.push(*f);
    }
    if hull.is_empty() {
        return;
    }
    let dist = |p: [i64; 2], i: i64| (p[axis] - i).pow(2) + off(p);
    let mut l = 0;
    for (i, slot) in line.iter_mut().enumerate() {
        let mut best = dist(hull[l], i as i64);
        while l + 1 < hull.len() {
            let next = dist(hull[l + 1], i as i64);
            if best <= next {
                break;
            }
            best = next;
            l += 1;
        }
        *slot = Some(hull[l]);
    }
}

/// Exact Euclidean distance from every pixel to its nearest foreground pixel,
/// with that pixel's index: a separable Voronoi feature transform, columns
/// first, then rows. Equidistant candidates resolve as in the common
/// scientific-Python distance transform.
pub fn nearest_foreground(gt: &[bool], h: usize, w: usize) -> Vec<(f64, usize)> {
    let mut feats: Vec<Option<[i64; 2]>> = vec![None; h * w];
    let mut line = vec![None; h];
    for x in 0..w {
        for (y, slot) in line.iter_mut().enumerate() {
            *slot = gt[y * w + x].then_some([y as i64, x as i64]);
        }
        voronoi_line(&mut line, 0, x as i64);
        for (y, f) in line.iter().enumerate() {
            feats[y * w + x] = *f;
        }
    }
    for (y, row) in feats.chunks_mut(w).enumerate() {
        voronoi_line(row, 1, y as i64);
    }
    feats
        .iter()
        .enumerate()
        .map(|(i, f)| match f {
            Some([fy, fx]) => {
                let (dy, dx) = (fy - (i / w) as i64, fx - (i % w) as i64);
                (((dy * dy + dx * dx) as f64).sqrt(), *fy as usize * w + *fx as usize)
            }
            None => (f64::INFINITY, usize::MAX),
        })
        .collect()
}

/// Normalized `size x size` Gaussian kernel, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 - half, (i % size) as f64 - half);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted F-measure (`beta^2 = 1`): errors are propagated from the nearest
/// foreground pixel, smoothed by a 7x7 Gaussian (sigma 5) and weighted by
/// distance to the foreground.
pub fn weighted_f(pair: &EvalPair) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let positives = pair.positives();
    if positives == 0 {
        return 0.0;
    }
    let gt = &pair.gt;
    let err: Vec<f64> = pair.pred.iter().zip(gt).map(|(&p, &g)| (p - g as u8 as f64).abs()).collect();
    let nearest = nearest_foreground(gt, h, w);
    let propagated: Vec<f64> = (0..h * w).map(|i| if gt[i] { err[i] } else { err[nearest[i].1] }).collect();
    let kernel = gaussian_kernel(FW_KERNEL, FW_SIGMA);
    let half = (FW_KERNEL / 2) as isize;
    let mut tp_w = positives as f64;
    let (mut fp_w, mut fg_err) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let e = if gt[i] {
                let mut smoothed = 0.0;
                for ky in 0..FW_KERNEL {
                    for kx in 0..FW_KERNEL {
                        let (sy, sx) = (y as isize + ky as isize - half, x as isize + kx as isize - half);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            smoothed += kernel[ky * FW_KERNEL + kx] * propagated[sy as usize * w + sx as usize];
                        }
                    }
                }
                smoothed.min(err[i])
            } else {
                err[i] * (2.0 - ((0.5f64).ln() / 5.0 * nearest[i].0).exp())
            };
            if gt[i] {
                tp_w -= e;
                fg_err += e;
            } else {
                fp_w += e;
            }
        }
    }
    let recall = 1.0 - fg_err / positives as f64;
    let precision = tp_w / (tp_w + fp_w + EPS);
    (2.0 * recall * precision / (recall + precision + EPS)).clamp(0.0, 1.0)
}
