//! Binary-mask helpers on row-major `f32` planes.

/// Threshold at 0.5: values `>= 0.5` become 1.
pub fn binarize(map: &[f32]) -> Vec<f32> {
    map.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
}

/// 3×3 morphology over in-bounds neighbours: `max` dilates, `min` erodes.
fn morph3(src: &[f32], h: usize, w: usize, dilate: bool) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = src[y * w + x];
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = src[yy * w + xx];
                    acc = if dilate { acc.max(v) } else { acc.min(v) };
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn dilate3(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    morph3(src, h, w, true)
}

pub fn erode3(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    morph3(src, h, w, false)
}

/// Boundary band of a binary mask: `dilate3 XOR erode3`.
pub fn derive_contour(gt: &[f32], h: usize, w: usize) -> Vec<f32> {
    assert_eq!(gt.len(), h * w, "mask size mismatch");
    let d = dilate3(gt, h, w);
    let e = erode3(gt, h, w);
    d.iter()
        .zip(&e)
        .map(|(&a, &b)| if (a >= 0.5) != (b >= 0.5) { 1.0 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, lo: usize, side: usize) -> Vec<f32> {
        let mut m = vec![0.0; n * n];
        for y in lo..lo + side {
            for x in lo..lo + side {
                m[y * n + x] = 1.0;
            }
        }
        m
    }

    #[test]
    fn empty_mask_has_no_contour() {
        assert!(derive_contour(&[0.0; 64], 8, 8).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_band_matches_enumeration() {
        let c = derive_contour(&square(32, 11, 10), 32, 32);
        // Chebyshev distance to the square boundary: the ring just outside
        // (rows/cols 10 and 21) and the ring just inside (11 and 20).
        let mut want = 0;
        for y in 0..32i32 {
            for x in 0..32i32 {
                let outer = (10..=21).contains(&y) && (10..=21).contains(&x);
                let inner = (12..=19).contains(&y) && (12..=19).contains(&x);
                let band = outer && !inner;
                assert_eq!(c[(y * 32 + x) as usize] == 1.0, band, "({y},{x})");
                want += band as usize;
            }
        }
        assert_eq!(want, 12 * 12 - 8 * 8);
        assert_eq!(c.iter().filter(|&&v| v == 1.0).count(), want);
    }

    proptest! {
        #[test]
        fn complement_has_same_contour(bits in proptest::collection::vec(any::<bool>(), 14 * 14)) {
            // keep a one-pixel empty frame so every object is interior
            let mut gt = vec![0.0f32; 16 * 16];
            for y in 0..14 {
                for x in 0..14 {
                    gt[(y + 1) * 16 + x + 1] = bits[y * 14 + x] as u8 as f32;
                }
            }
            let inv: Vec<f32> = gt.iter().map(|v| 1.0 - v).collect();
            prop_assert_eq!(derive_contour(&gt, 16, 16), derive_contour(&inv, 16, 16));
        }

        #[test]
        fn contour_lies_in_dilated_foreground(bits in proptest::collection::vec(any::<bool>(), 12 * 9)) {
            let gt: Vec<f32> = bits.iter().map(|&b| b as u8 as f32).collect();
            let c = derive_contour(&gt, 12, 9);
            let d = dilate3(&gt, 12, 9);
            prop_assert!(c.iter().zip(&d).all(|(c, d)| *c <= *d));
        }
    }
}
