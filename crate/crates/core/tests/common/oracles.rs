//! Plain scalar-loop reference implementations, written independently of the
//! library's vectorized or streaming versions.

use soda_core::metrics::EvalPair;

const EPS: f64 = f64::EPSILON;

/// Kahan-compensated sum.
pub fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let y = v - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

/// Maximum over the window clipped to the map, by direct enumeration.
pub fn window_max_naive(src: &[f32], h: usize, w: usize, window: usize) -> Vec<f32> {
    let r = (window / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = f32::NEG_INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        m = m.max(src[yy as usize * w + xx as usize]);
                    }
                }
            }
            out[y as usize * w + x as usize] = m;
        }
    }
    out
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One `(B, 1, H, W)` map as `B` images of `H * W` values.
pub type Maps = Vec<Vec<f64>>;

pub fn bce(logits: &Maps, gt: &Maps, alpha: &Maps) -> f64 {
    let n = logits.len() * logits[0].len();
    let terms = logits.iter().zip(gt).zip(alpha).flat_map(|((x, g), a)| {
        x.iter().zip(g).zip(a).map(|((&x, &g), &a)| a * (g * softplus(-x) + (1.0 - g) * softplus(x)))
    });
    ksum(terms) / n as f64
}

pub fn iou(logits: &Maps, gt: &Maps, alpha: &Maps) -> f64 {
    let per_image = logits.iter().zip(gt).zip(alpha).map(|((x, g), a)| {
        let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        let inter = ksum(p.iter().zip(g).zip(a).map(|((p, g), a)| a * p * g));
        let union = ksum(p.iter().zip(g).zip(a).map(|((p, g), a)| a * (p + g - p * g)));
        1.0 - (inter + 1e-6) / (union + 1e-6)
    });
    ksum(per_image) / logits.len() as f64
}

pub fn l1(logits: &Maps, gt: &Maps, alpha: &Maps) -> f64 {
    let n = logits.len() * logits[0].len();
    let terms = logits
        .iter()
        .zip(gt)
        .zip(alpha)
        .flat_map(|((x, g), a)| x.iter().zip(g).zip(a).map(|((&x, &g), &a)| a * (sigmoid(x) - g).abs()));
    ksum(terms) / n as f64
}

pub fn dice(logits: &Maps, gt: &Maps) -> f64 {
    let per_image = logits.iter().zip(gt).map(|(x, g)| {
        let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        let inter = ksum(p.iter().zip(g).map(|(p, g)| p * g));
        1.0 - (2.0 * inter + 1.0) / (ksum(p.iter().copied()) + ksum(g.iter().copied()) + 1.0)
    });
    ksum(per_image) / logits.len() as f64
}

/// Dataset F-max by explicit confusion matrices at each of the 256 thresholds.
pub fn f_max_bruteforce(pairs: &[EvalPair]) -> f64 {
    let mut best = 0.0f64;
    for t in 0..256i64 {
        let (mut p_sum, mut r_sum, mut counted) = (0.0, 0.0, 0usize);
        for pair in pairs {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
                let on = (p * 255.0).round() as i64 >= t;
                match (on, g) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            if tp + fn_ == 0 {
                continue;
            }
            p_sum += if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            r_sum += tp as f64 / (tp + fn_) as f64;
            counted += 1;
        }
        if counted == 0 {
            continue;
        }
        let (p, r) = (p_sum / counted as f64, r_sum / counted as f64);
        let denom = 0.3 * p + r;
        let f = if denom > 0.0 { (1.0 + 0.3) * p * r / denom } else { 0.0 };
        best = best.max(f);
    }
    best
}

fn grid<T: Copy>(v: &[T], h: usize, w: usize) -> Vec<Vec<T>> {
    (0..h).map(|y| v[y * w..(y + 1) * w].to_vec()).collect()
}

fn stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn ssim_block(p: &[Vec<f64>], g: &[Vec<f64>], rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let mut ps = Vec::new();
    let mut gs = Vec::new();
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            ps.push(p[y][x]);
            gs.push(g[y][x]);
        }
    }
    let n = ps.len();
    if n == 0 {
        return 0.0;
    }
    let mx = ps.iter().sum::<f64>() / n as f64;
    let my = gs.iter().sum::<f64>() / n as f64;
    let d = (n.max(2) - 1) as f64;
    let sx = ps.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / d;
    let sy = gs.iter().map(|v| (v - my).powi(2)).sum::<f64>() / d;
    let sxy = ps.iter().zip(&gs).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / d;
    let a = 4.0 * mx * my * sxy;
    let b = (mx * mx + my * my) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(pair: &EvalPair) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let g: Vec<f64> = pair.gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let n = (h * w) as f64;
    let u = g.iter().sum::<f64>() / n;
    let mean_p = pair.pred.iter().sum::<f64>() / n;
    if u == 0.0 {
        return 1.0 - mean_p;
    }
    if u == 1.0 {
        return mean_p;
    }
    let object = |vals: Vec<f64>| {
        let (m, s) = stats(&vals);
        2.0 * m / (m * m + 1.0 + s + EPS)
    };
    let fg: Vec<f64> = pair.pred.iter().zip(&pair.gt).filter(|(_, &b)| b).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pair.pred.iter().zip(&pair.gt).filter(|(_, &b)| !b).map(|(&p, _)| 1.0 - p).collect();
    let so = u * object(fg) + (1.0 - u) * object(bg);

    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if pair.gt[y * w + x] {
                sx += x as f64;
                sy += y as f64;
                cnt += 1.0;
            }
        }
    }
    let cx = ((sx / cnt).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / cnt).round_ties_even() as usize + 1).min(h);
    let (pg, gg) = (grid(&pair.pred, h, w), grid(&g, h, w));
    let area = n;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let sr = w1 * ssim_block(&pg, &gg, (0, cy), (0, cx))
        + w2 * ssim_block(&pg, &gg, (0, cy), (cx, w))
        + w3 * ssim_block(&pg, &gg, (cy, h), (0, cx))
        + w4 * ssim_block(&pg, &gg, (cy, h), (cx, w));
    (0.5 * so + 0.5 * sr).clamp(0.0, 1.0)
}

/// Per-pixel enhanced-alignment matrix, summed and divided by the pixel count.
pub fn e_measure(pair: &EvalPair) -> f64 {
    let n = pair.pred.len() as f64;
    let thr = (2.0 * pair.pred.iter().sum::<f64>() / n).min(1.0);
    let fm: Vec<f64> = pair.pred.iter().map(|&p| if p >= thr && p > 0.0 { 1.0 } else { 0.0 }).collect();
    let g: Vec<f64> = pair.gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let gsum = g.iter().sum::<f64>();
    if gsum == 0.0 {
        return fm.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if gsum == n {
        return fm.iter().sum::<f64>() / n;
    }
    let (mf, mg) = (fm.iter().sum::<f64>() / n, gsum / n);
    let mut total = 0.0;
    for (f, g) in fm.iter().zip(&g) {
        let (df, dg) = (f - mf, g - mg);
        let align = 2.0 * dg * df / (dg * dg + df * df + EPS);
        total += (align + 1.0).powi(2) / 4.0;
    }
    total / n
}

/// Weighted F-measure given, for every pixel, the index of the foreground
/// pixel whose error it inherits. Distances are recomputed by brute force.
pub fn weighted_f(pair: &EvalPair, nearest: &[usize]) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let g = &pair.gt;
    let fg: Vec<usize> = (0..h * w).filter(|&i| g[i]).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let err: Vec<f64> = (0..h * w).map(|i| (pair.pred[i] - if g[i] { 1.0 } else { 0.0 }).abs()).collect();
    let dist: Vec<f64> = (0..h * w)
        .map(|i| {
            fg.iter()
                .map(|&j| {
                    let (dy, dx) = ((i / w) as f64 - (j / w) as f64, (i % w) as f64 - (j % w) as f64);
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { err[i] } else { err[nearest[i]] }).collect();
    let mut k = [[0.0f64; 7]; 7];
    let mut ks = 0.0;
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 3.0, x as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
            ks += *v;
        }
    }
    let mut ew = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if g[i] {
                let mut ea = 0.0;
                for (ky, row) in k.iter().enumerate() {
                    for (kx, v) in row.iter().enumerate() {
                        let (yy, xx) = (y as isize + ky as isize - 3, x as isize + kx as isize - 3);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            ea += v / ks * et[yy as usize * w + xx as usize];
                        }
                    }
                }
                ew[i] = if ea < err[i] { ea } else { err[i] };
            } else {
                ew[i] = err[i] * (2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp());
            }
        }
    }
    let fg_err: f64 = fg.iter().map(|&i| ew[i]).sum();
    let tpw = fg.len() as f64 - fg_err;
    let fpw: f64 = (0..h * w).filter(|&i| !g[i]).map(|i| ew[i]).sum();
    let r = 1.0 - fg_err / fg.len() as f64;
    let p = tpw / (tpw + fpw + EPS);
    2.0 * r * p / (r + p + EPS)
}
