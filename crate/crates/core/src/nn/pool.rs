//! Non-overlapping max pooling whose gradient goes to the first maximum of each window.

use std::cell::RefCell;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

thread_local! {
    static TRACE: RefCell<Option<Vec<usize>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns, with its result, the window maxima every forward max
/// pool on this thread selected meanwhile, in call order. Two evaluations with
/// equal traces lie on the same linear piece of every pooling.
pub fn trace_selections<R>(f: impl FnOnce() -> R) -> (R, Vec<usize>) {
    let outer = TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let r = f();
    let trace = TRACE.with(|t| std::mem::replace(&mut *t.borrow_mut(), outer)).unwrap_or_default();
    (r, trace)
}

fn record(picks: &[usize]) {
    TRACE.with(|t| {
        if let Some(trace) = t.borrow_mut().as_mut() {
            trace.extend_from_slice(picks);
        }
    });
}

/// `k × k` max pooling with stride `k` over a `(B, C, H, W)` tensor; trailing
/// rows and columns that do not fill a window are dropped.
pub fn max_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if k == 0 || h < k || w < k {
        return Err(Error::Shape(format!("cannot max-pool {h}x{w} with window {k}")));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool { k })?)
}

struct MaxPool {
    k: usize,
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("max pool expects contiguous input"),
    }
}

/// Flat index of the first maximum of every window, in output order.
fn argmax<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<usize> {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for y in oy * k..(oy + 1) * k {
                    for xx in ox * k..(ox + 1) * k {
                        let i = base + y * w + xx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let k = self.k;
        let out = match s {
            CpuStorage::F32(v) => {
                let v = slice(v, l)?;
                let picks = argmax(v, b * c, h, w, k);
                record(&picks);
                CpuStorage::F32(picks.into_iter().map(|i| v[i]).collect())
            }
            CpuStorage::F64(v) => {
                let v = slice(v, l)?;
                let picks = argmax(v, b * c, h, w, k);
                record(&picks);
                CpuStorage::F64(picks.into_iter().map(|i| v[i]).collect())
            }
            _ => candle_core::bail!("max pool: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h / k, w / k))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolScatter { k: self.k })?;
        Ok(Some(g))
    }
}

/// Routes each output gradient to its window's first maximum.
struct MaxPoolScatter {
    k: usize,
}

fn scatter<T: WithDType>(x: &[T], grad: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    for (i, &g) in argmax(x, planes, h, w, k).into_iter().zip(grad) {
        out[i] += g;
    }
    out
}

impl CustomOp2 for MaxPoolScatter {
    fn name(&self) -> &'static str {
        "max-pool-scatter"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let k = self.k;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(scatter(slice(x, l1)?, slice(g, l2)?, b * c, h, w, k)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(scatter(slice(x, l1)?, slice(g, l2)?, b * c, h, w, k)),
            _ => candle_core::bail!("max pool scatter: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}
