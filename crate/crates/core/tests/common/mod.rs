//! Shared fixtures and scalar reference implementations for the integration suites.
#![allow(dead_code)]

pub mod oracles;

use soda_core::metrics::EvalPair;

/// Three deterministic prediction/ground-truth pairs of different shapes.
pub fn metric_fixtures() -> Vec<EvalPair> {
    [(24usize, 32usize), (17, 13), (40, 40)]
        .iter()
        .enumerate()
        .map(|(k, &(h, w))| {
            let mut pred = Vec::with_capacity(h * w);
            let mut gt = Vec::with_capacity(h * w);
            let (cy, cx) = (h as f64 * (0.4 + 0.1 * k as f64), w as f64 * 0.55);
            for i in 0..h {
                for j in 0..w {
                    let idx = i * w + j;
                    let noise = ((idx * (7919 + k) + 13 * j + 5 * k) % 101) as f64 / 100.0;
                    let (dy, dx) = ((i as f64 - cy) / (0.3 * h as f64), (j as f64 - cx) / (0.25 * w as f64));
                    let mut inside = dy * dy + dx * dx <= 1.0;
                    if k == 1 {
                        inside |= i < 3 && j > 9;
                    }
                    let g = inside as u8 as f64;
                    pred.push((0.6 * g + 0.4 * noise).clamp(0.0, 1.0));
                    gt.push(g as f32);
                }
            }
            EvalPair::new(pred, &gt, h, w).unwrap()
        })
        .collect()
}

/// `(S, E, Fw, MAE)` of [`metric_fixtures`] from an external scientific-Python
/// implementation of the same definitions.
pub const FIXTURE_REFERENCE: [[f64; 4]; 3] = [
    [0.832049718396, 0.925592945299, 0.592994292048, 0.205182291667],
    [0.858793467757, 0.890145973310, 0.686580554768, 0.194009049774],
    [0.838806829388, 0.932770607174, 0.584565808499, 0.200585000000],
];
