//! Fused normalization + affine + optional GELU with an analytic backward pass.

use std::sync::{Arc, Mutex};

use candle_core::cpu::erf::erf_f64;
use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Which elements share normalization statistics.
#[derive(Debug, Clone)]
pub enum Stats {
    /// Per channel over batch and pixels.
    Batch,
    /// Per sample and channel group.
    Group(usize),
    /// Precomputed per-channel mean and variance (no gradient through them).
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// `y = act(gamma * (x - mean) / sqrt(var + eps) + beta)` on `(B, C, H, W)`.
///
/// For [`Stats::Batch`] and [`Stats::Group`], the computed per-segment mean and
/// biased variance are written to `moments` when given.
pub fn norm_act(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: Stats,
    eps: f64,
    gelu: bool,
    moments: Option<Arc<Mutex<Moments>>>,
) -> Result<Tensor> {
    let op = NormAct { stats, eps, gelu, moments };
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?)
}

#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone)]
struct NormAct {
    stats: Stats,
    eps: f64,
    gelu: bool,
    moments: Option<Arc<Mutex<Moments>>>,
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    n: usize,
}

impl Stats {
    fn segments(&self, d: Dims) -> usize {
        match self {
            Stats::Batch | Stats::Fixed { .. } => d.c,
            Stats::Group(g) => d.b * g,
        }
    }

    fn segment(&self, d: Dims, b: usize, c: usize) -> usize {
        match self {
            Stats::Batch | Stats::Fixed { .. } => c,
            Stats::Group(g) => b * g + c / (d.c / g),
        }
    }
}

const LANES: usize = 8;

/// Element types with a Gaussian CDF/PDF pair for the activation.
trait Act: WithDType {
    /// `(cdf(z), pdf(z))` of the standard normal.
    fn cdf_pdf(z: Self) -> (Self, Self);
}

impl Act for f64 {
    fn cdf_pdf(z: f64) -> (f64, f64) {
        let cdf = 0.5 * (1.0 + erf_f64(z * std::f64::consts::FRAC_1_SQRT_2));
        (cdf, FRAC_1_SQRT_2PI * (-0.5 * z * z).exp())
    }
}

const ROUND: f32 = 12_582_912.0;

/// Branch-free `exp` (relative error below 3e-7) so slice loops vectorize.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    let x = x.max(-87.0).min(88.0);
    let m = x * std::f32::consts::LOG2_E + ROUND;
    let k = m - ROUND;
    let r = x - k * 0.693_145_75 - k * 1.428_606_8e-6;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (0.166_666_57 + r * (0.041_665_73 + r * (0.008_333_02 + r * 0.001_388_89)))));
    let bits = (m.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127)) << 23;
    f32::from_bits(bits) * p
}

impl Act for f32 {
    #[inline(always)]
    fn cdf_pdf(z: f32) -> (f32, f32) {
        let a = z.abs() * std::f32::consts::FRAC_1_SQRT_2;
        let e = exp_f32(-a * a);
        let t = 1.0 / (1.0 + 0.327_591_1 * a);
        let poly = ((((1.061_405_4 * t - 1.453_152) * t + 1.421_413_8) * t - 0.284_496_74) * t + 0.254_829_6) * t;
        let erf_abs = 1.0 - poly * e;
        let erf = f32::from_bits(erf_abs.to_bits() | (z.to_bits() & 0x8000_0000));
        (0.5 * (1.0 + erf), e * FRAC_1_SQRT_2PI as f32)
    }
}

fn fold<T: WithDType>(acc: [T; LANES]) -> f64 {
    acc.iter().map(|v| v.to_f64()).sum()
}

/// `(sum, sum of squared deviations from shift)` of a slice.
fn plane_sums<T: WithDType>(p: &[T], shift: T) -> (f64, f64) {
    let zero = T::from_f64(0.0);
    let (mut s, mut q) = ([zero; LANES], [zero; LANES]);
    let chunks = p.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for j in 0..LANES {
            let v = c[j] - shift;
            s[j] += c[j];
            q[j] += v * v;
        }
    }
    let (mut s, mut q) = (fold(s), fold(q));
    for &v in rest {
        let dv = (v - shift).to_f64();
        s += v.to_f64();
        q += dv * dv;
    }
    (s, q)
}

fn moments<T: WithDType>(stats: &Stats, d: Dims, x: &[T]) -> Moments {
    if let Stats::Fixed { mean, var } = stats {
        return Moments { mean: mean.clone(), var: var.clone() };
    }
    let s = stats.segments(d);
    let mut sum = vec![0.0; s];
    let mut count = vec![0usize; s];
    for b in 0..d.b {
        for c in 0..d.c {
            let k = stats.segment(d, b, c);
            let plane = &x[(b * d.c + c) * d.n..(b * d.c + c + 1) * d.n];
            sum[k] += plane_sums(plane, T::from_f64(0.0)).0;
            count[k] += d.n;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut sq = vec![0.0; s];
    for b in 0..d.b {
        for c in 0..d.c {
            let k = stats.segment(d, b, c);
            let plane = &x[(b * d.c + c) * d.n..(b * d.c + c + 1) * d.n];
            sq[k] += plane_sums(plane, T::from_f64(mean[k])).1;
        }
    }
    let var = sq.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    Moments { mean, var }
}

impl NormAct {
    fn rstd(&self, m: &Moments) -> Vec<f64> {
        m.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }

    fn forward<T: Act>(&self, d: Dims, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let m = moments(&self.stats, d, x);
        let rstd = self.rstd(&m);
        let mut out = vec![T::from_f64(0.0); x.len()];
        for b in 0..d.b {
            for c in 0..d.c {
                let k = self.stats.segment(d, b, c);
                let scale = gamma[c].to_f64() * rstd[k];
                let shift = T::from_f64(beta[c].to_f64() - m.mean[k] * scale);
                let scale = T::from_f64(scale);
                let off = (b * d.c + c) * d.n;
                let (dst, src) = (&mut out[off..off + d.n], &x[off..off + d.n]);
                if self.gelu {
                    for (o, &v) in dst.iter_mut().zip(src) {
                        let z = v * scale + shift;
                        *o = z * T::cdf_pdf(z).0;
                    }
                } else {
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        if let Some(slot) = &self.moments {
            if let Ok(mut guard) = slot.lock() {
                *guard = m;
            }
        }
        out
    }

    /// Packed `[dx (B*C*H*W), dgamma (C), dbeta (C)]`.
    fn backward<T: Act>(&self, d: Dims, x: &[T], affine: &[T], grad: &[T]) -> Vec<T> {
        let (gamma, beta) = affine.split_at(d.c);
        let m = moments(&self.stats, d, x);
        let rstd = self.rstd(&m);
        let segs = self.stats.segments(d);
        let len = x.len();
        let zero = T::from_f64(0.0);
        // first pass: out holds d(xhat); collect affine grads and per-segment sums
        let mut out = vec![zero; len + 2 * d.c];
        let mut dgamma = vec![0.0f64; d.c];
        let mut dbeta = vec![0.0f64; d.c];
        let mut sum_d = vec![0.0f64; segs];
        let mut sum_dx = vec![0.0f64; segs];
        for b in 0..d.b {
            for c in 0..d.c {
                let k = self.stats.segment(d, b, c);
                let g = gamma[c];
                let (bt, mu, r) = (beta[c], T::from_f64(m.mean[k]), T::from_f64(rstd[k]));
                let off = (b * d.c + c) * d.n;
                let (mut sg, mut sb) = ([zero; LANES], [zero; LANES]);
                let step = |dh: &mut T, xv: T, gv: T, sg: &mut T, sb: &mut T| {
                    let xh = (xv - mu) * r;
                    let dz = if self.gelu {
                        let z = g * xh + bt;
                        let (cdf, pdf) = T::cdf_pdf(z);
                        gv * (cdf + z * pdf)
                    } else {
                        gv
                    };
                    *sg += dz * xh;
                    *sb += dz;
                    *dh = dz * g;
                };
                let tail = d.n - d.n % LANES;
                let dst = out[off..off + tail].chunks_exact_mut(LANES);
                let (xs, gs) = (x[off..off + tail].chunks_exact(LANES), grad[off..off + tail].chunks_exact(LANES));
                for ((dc, xc), gc) in dst.zip(xs).zip(gs) {
                    for j in 0..LANES {
                        step(&mut dc[j], xc[j], gc[j], &mut sg[j], &mut sb[j]);
                    }
                }
                for i in off + tail..off + d.n {
                    step(&mut out[i], x[i], grad[i], &mut sg[0], &mut sb[0]);
                }
                let (sg, sb) = (fold(sg), fold(sb));
                let g = g.to_f64();
                dgamma[c] += sg;
                dbeta[c] += sb;
                sum_d[k] += sb * g;
                sum_dx[k] += sg * g;
            }
        }
        let fixed = matches!(self.stats, Stats::Fixed { .. });
        let count = (len / segs) as f64;
        for b in 0..d.b {
            for c in 0..d.c {
                let k = self.stats.segment(d, b, c);
                let off = (b * d.c + c) * d.n;
                let (mu, r) = (T::from_f64(m.mean[k]), T::from_f64(rstd[k]));
                let (md, mdx) = if fixed {
                    (zero, zero)
                } else {
                    (T::from_f64(sum_d[k] / count), T::from_f64(sum_dx[k] / count))
                };
                for (dh, &xv) in out[off..off + d.n].iter_mut().zip(&x[off..off + d.n]) {
                    let xh = (xv - mu) * r;
                    *dh = (*dh - md - xh * mdx) * r;
                }
            }
        }
        for (o, v) in out[len..].iter_mut().zip(dgamma.into_iter().chain(dbeta)) {
            *o = T::from_f64(v);
        }
        out
    }
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("norm-act expects contiguous inputs"),
    }
}

fn dims(l: &Layout) -> candle_core::Result<Dims> {
    let (b, c, h, w) = l.shape().dims4()?;
    Ok(Dims { b, c, n: h * w })
}

impl CustomOp3 for NormAct {
    fn name(&self) -> &'static str {
        "norm-act"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims(l1)?;
        if let Stats::Group(g) = self.stats {
            if g == 0 || d.c % g != 0 {
                candle_core::bail!("norm-act: {} channels not divisible into {g} groups", d.c);
            }
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.forward(d, slice(x, l1)?, slice(g, l2)?, slice(b, l3)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.forward(d, slice(x, l1)?, slice(g, l2)?, slice(b, l3)?))
            }
            _ => candle_core::bail!("norm-act: unsupported or mismatched dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.elem_count();
        let affine = Tensor::cat(&[gamma.flatten_all()?, beta.flatten_all()?], 0)?;
        let back = NormActGrad { inner: NormAct { moments: None, ..self.clone() } };
        let packed = x.apply_op3_no_bwd(&affine, &grad.contiguous()?, &back)?;
        let n = x.elem_count();
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dg = packed.narrow(0, n, c)?.reshape(gamma.shape())?;
        let db = packed.narrow(0, n + c, c)?.reshape(beta.shape())?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

struct NormActGrad {
    inner: NormAct,
}

impl CustomOp3 for NormActGrad {
    fn name(&self) -> &'static str {
        "norm-act-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims(l1)?;
        let len = l1.shape().elem_count() + 2 * d.c;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(g)) => {
                CpuStorage::F32(self.inner.backward(d, slice(x, l1)?, slice(a, l2)?, slice(g, l3)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(g)) => {
                CpuStorage::F64(self.inner.backward(d, slice(x, l1)?, slice(a, l2)?, slice(g, l3)?))
            }
            _ => candle_core::bail!("norm-act-grad: unsupported or mismatched dtypes"),
        };
        Ok((out, Shape::from(len)))
    }
}
