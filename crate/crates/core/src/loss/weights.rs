//! Per-pixel loss weights derived from ground truth.

use std::collections::VecDeque;

/// Side of the square window used for the foreground weight map.
pub const FG_WINDOW: usize = 31;

/// Sliding maximum along one axis; the window is clamped to the valid range,
/// which equals replicate padding for a max filter.
fn running_max(src: &[f32], radius: usize, out: &mut [f32]) {
    let n = src.len();
    let mut dq: VecDeque<usize> = VecDeque::with_capacity(2 * radius + 1);
    let mut next = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let hi = (i + radius).min(n - 1);
        while next <= hi {
            while dq.back().is_some_and(|&b| src[b] <= src[next]) {
                dq.pop_back();
            }
            dq.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(radius);
        while dq.front().is_some_and(|&f| f < lo) {
            dq.pop_front();
        }
        *o = src[*dq.front().expect("window is never empty")];
    }
}

/// Centered `window × window` maximum filter over a row-major `h × w` map.
pub fn window_max(src: &[f32], h: usize, w: usize, window: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "map size mismatch");
    assert!(window % 2 == 1, "window must be odd");
    let r = window / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        running_max(&src[y * w..(y + 1) * w], r, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![0.0; h * w];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        running_max(&col, r, &mut col_out);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    out
}

/// Foreground weights: the 31×31 window maximum of the ground truth.
pub fn fg_weight_map(gt: &[f32], h: usize, w: usize) -> Vec<f32> {
    window_max(gt, h, w, FG_WINDOW)
}

/// Background ground truth, `1 − gt`; also the background weight map.
pub fn bg_ground_truth(gt: &[f32]) -> Vec<f32> {
    gt.iter().map(|g| 1.0 - g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(src: &[f32], h: usize, w: usize, window: usize) -> Vec<f32> {
        let r = (window / 2) as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut m = f32::NEG_INFINITY;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        m = m.max(src[yy * w + xx]);
                    }
                }
                out[y as usize * w + x as usize] = m;
            }
        }
        out
    }

    #[test]
    fn constant_one() {
        assert!(fg_weight_map(&[1.0; 40 * 33], 40, 33).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_pixel_covers_small_map() {
        let mut gt = vec![0.0; 25 * 25];
        gt[12 * 25 + 12] = 1.0;
        assert!(fg_weight_map(&gt, 25, 25).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn background_involution() {
        let gt = [0.0, 0.25, 1.0, 0.5];
        assert_eq!(bg_ground_truth(&bg_ground_truth(&gt)), gt.to_vec());
        assert_eq!(bg_ground_truth(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(bg_ground_truth(&[0.0]), vec![1.0]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(h in 1usize..40, w in 1usize..40, window in (0usize..8).prop_map(|k| 2 * k + 1), seed in any::<u64>()) {
            let mut s = seed;
            let src: Vec<f32> = (0..h * w).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) % 7) as f32 / 6.0
            }).collect();
            prop_assert_eq!(window_max(&src, h, w, window), brute(&src, h, w, window));
        }

        #[test]
        fn dominates_binary_gt(bits in proptest::collection::vec(any::<bool>(), 20 * 20)) {
            let gt: Vec<f32> = bits.iter().map(|&b| b as u8 as f32).collect();
            let a = fg_weight_map(&gt, 20, 20);
            prop_assert!(a.iter().zip(&gt).all(|(a, g)| a >= g && (0.0..=1.0).contains(a)));
        }
    }
}
