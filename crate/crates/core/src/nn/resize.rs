//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// One output sample along an axis: `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Interpolation taps mapping an axis of length `input` to length `output`.
pub fn axis_taps(output: usize, input: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

fn resize_planes<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_taps(oh, h);
    let tx = axis_taps(ow, w);
    let zero = T::from_f64(0.0);
    let mut out = vec![zero; planes * oh * ow];
    let mut rows = vec![zero; h * ow];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let srow = &plane[y * w..(y + 1) * w];
            let drow = &mut rows[y * ow..(y + 1) * ow];
            for (d, t) in drow.iter_mut().zip(&tx) {
                let f = T::from_f64(t.frac);
                *d = srow[t.lo] * (T::from_f64(1.0) - f) + srow[t.hi] * f;
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let f = T::from_f64(t.frac);
            let g = T::from_f64(1.0) - f;
            let (a, b) = (&rows[t.lo * ow..(t.lo + 1) * ow], &rows[t.hi * ow..(t.hi + 1) * ow]);
            for ((d, &va), &vb) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(a).zip(b) {
                *d = va * g + vb * f;
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`]: maps output-space gradients back onto the input grid.
fn resize_planes_adjoint<T: WithDType>(
    grad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = axis_taps(oh, h);
    let tx = axis_taps(ow, w);
    let zero = T::from_f64(0.0);
    let mut out = vec![zero; planes * h * w];
    let mut rows = vec![zero; h * ow];
    for p in 0..planes {
        rows.fill(zero);
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let f = T::from_f64(t.frac);
            let c = T::from_f64(1.0) - f;
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                rows[t.lo * ow + ox] += v * c;
                rows[t.hi * ow + ox] += v * f;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, t) in tx.iter().enumerate() {
                let v = rows[y * ow + ox];
                let f = T::from_f64(t.frac);
                dst[y * w + t.lo] += v * (T::from_f64(1.0) - f);
                dst[y * w + t.hi] += v * f;
            }
        }
    }
    out
}

/// Resize a single-channel `f32` plane stored row-major.
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    resize_planes(src, 1, h, w, oh, ow)
}

/// Differentiable bilinear resize of a `(B, C, H, W)` tensor.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot resize to {oh}x{ow}")));
    }
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(Resize { oh, ow })?)
}

struct Resize {
    oh: usize,
    ow: usize,
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("bilinear resize expects contiguous input"),
    }
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "bilinear-resize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (self.oh, self.ow);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(resize_planes(slice(v, l)?, b * c, h, w, oh, ow)),
            CpuStorage::F64(v) => CpuStorage::F64(resize_planes(slice(v, l)?, b * c, h, w, oh, ow)),
            _ => candle_core::bail!("bilinear resize: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, oh, ow))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1_no_bwd(&ResizeAdjoint { h, w })?;
        Ok(Some(g))
    }
}

struct ResizeAdjoint {
    h: usize,
    w: usize,
}

impl CustomOp1 for ResizeAdjoint {
    fn name(&self) -> &'static str {
        "bilinear-resize-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, oh, ow) = l.shape().dims4()?;
        let (h, w) = (self.h, self.w);
        let out = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(resize_planes_adjoint(slice(v, l)?, b * c, h, w, oh, ow))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(resize_planes_adjoint(slice(v, l)?, b * c, h, w, oh, ow))
            }
            _ => candle_core::bail!("bilinear resize adjoint: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn constant_map_stays_constant() {
        let x = (Tensor::ones((1, 2, 5, 7), candle_core::DType::F64, &Device::Cpu).unwrap() * 3.25).unwrap();
        let y = resize_bilinear(&x, 10, 14).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 3.25).abs() < 1e-12));
    }

    #[test]
    fn doubling_matches_half_pixel_convention() {
        // Output centers map to -0.25, 0.25, 0.75, 1.25 on the input grid, clamped at the ends.
        let out = resize_plane(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn adjoint_is_transpose() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1., (2, 3, 5, 6), &dev).unwrap();
        let y = resize_bilinear(&x, 9, 4).unwrap();
        let probe = Tensor::randn(0f64, 1., y.shape(), &dev).unwrap();
        let grads = (&y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = grads.get(&x).unwrap();
        // <A x, p> == <x, A^T p> for a second random x
        let x2 = Tensor::randn(0f64, 1., x.shape(), &dev).unwrap();
        let lhs = (resize_bilinear(&x2, 9, 4).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (&x2 * gx).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
