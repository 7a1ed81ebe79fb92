//! Maximum F-measure over 256 quantized thresholds.

use serde::{Deserialize, Serialize};

use super::pair::EvalPair;

pub const LEVELS: usize = 256;
pub const F_BETA2: f64 = 0.3;

/// 8-bit level of a prediction value.
pub fn quantize(p: f64) -> usize {
    (p * 255.0).round().clamp(0.0, 255.0) as usize
}

pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom > 0.0 {
        (1.0 + beta2) * precision * recall / denom
    } else {
        0.0
    }
}

/// Per-threshold `(precision, recall)` of one image, thresholds `t = 0..=255`
/// binarizing `quantize(pred) >= t`. `None` when the ground truth is empty.
pub fn pr_curve(pair: &EvalPair) -> Option<Vec<(f64, f64)>> {
    let positives = pair.positives();
    if positives == 0 {
        return None;
    }
    let mut fg = [0usize; LEVELS];
    let mut bg = [0usize; LEVELS];
    for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
        if g {
            fg[quantize(p)] += 1;
        } else {
            bg[quantize(p)] += 1;
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = vec![(0.0, 0.0); LEVELS];
    for t in (0..LEVELS).rev() {
        tp += fg[t];
        fp += bg[t];
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        curve[t] = (precision, tp as f64 / positives as f64);
    }
    Some(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FMax {
    pub value: f64,
    /// Dataset-mean `(precision, recall)` per threshold.
    pub curve: Vec<(f64, f64)>,
    /// Images left out of the precision/recall means for having no positives.
    pub skipped_empty: usize,
}

/// Streaming dataset accumulator: precision and recall are averaged over
/// images first, then combined into F per threshold.
#[derive(Debug, Clone)]
pub struct FMaxAccumulator {
    sum: Vec<(f64, f64)>,
    counted: usize,
    skipped: usize,
}

impl Default for FMaxAccumulator {
    fn default() -> Self {
        Self { sum: vec![(0.0, 0.0); LEVELS], counted: 0, skipped: 0 }
    }
}

impl FMaxAccumulator {
    pub fn add(&mut self, pair: &EvalPair) {
        match pr_curve(pair) {
            Some(curve) => {
                for (acc, (p, r)) in self.sum.iter_mut().zip(curve) {
                    acc.0 += p;
                    acc.1 += r;
                }
                self.counted += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn finish(&self) -> FMax {
        let n = self.counted.max(1) as f64;
        let curve: Vec<(f64, f64)> = if self.counted == 0 {
            vec![(0.0, 0.0); LEVELS]
        } else {
            self.sum.iter().map(|&(p, r)| (p / n, r / n)).collect()
        };
        let value = curve.iter().map(|&(p, r)| f_beta(p, r, F_BETA2)).fold(0.0, f64::max);
        FMax { value, curve, skipped_empty: self.skipped }
    }
}

pub fn f_max(pairs: &[EvalPair]) -> FMax {
    let mut acc = FMaxAccumulator::default();
    for p in pairs {
        acc.add(p);
    }
    acc.finish()
}
