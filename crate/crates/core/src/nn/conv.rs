//! Stride-1 "same" 2-D convolution with dilation, implemented as im2col + GEMM.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Convolution of `x: (B, Cin, H, W)` with `weight: (Cout, Cin, k, k)` plus a
/// per-channel `bias: (Cout)`, stride 1, zero padding `dilation * (k - 1) / 2`
/// so the spatial size is preserved.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: &Tensor, dilation: usize) -> Result<Tensor> {
    let (_, cin, _, _) = x.dims4()?;
    let (_, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    if bias.dims() != [weight.dim(0)?] {
        return Err(Error::Shape(format!("conv bias {:?} does not match {} output channels", bias.dims(), weight.dim(0)?)));
    }
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    Ok(x.apply_op3(&weight, &bias.contiguous()?, DilatedConv { dilation })?)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Signed offsets (dy, dx) of kernel tap `(ky, kx)` relative to the output pixel.
    fn tap(&self, ky: usize, kx: usize) -> (isize, isize) {
        let half = (self.k / 2) as isize;
        let d = self.dilation as isize;
        ((ky as isize - half) * d, (kx as isize - half) * d)
    }

    /// Output columns `[x0, x1)` whose source column `x + dx` is inside the image.
    fn valid_cols(&self, dx: isize) -> (usize, usize) {
        let w = self.w as isize;
        let x0 = (-dx).clamp(0, w) as usize;
        let x1 = (w - dx).clamp(0, w) as usize;
        (x0, x1.max(x0))
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what}: expected a contiguous tensor"),
    }
}

/// Unfold one `(Cin, H, W)` image into a `(Cin*k*k, H*W)` row-major matrix.
fn im2col<T: Float>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let n = g.plane();
    let zero = T::from_f64(0.0);
    for ci in 0..g.cin {
        let plane = &img[ci * n..(ci + 1) * n];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * n..(r + 1) * n];
                let (dy, dx) = g.tap(ky, kx);
                let (x0, x1) = g.valid_cols(dx);
                for y in 0..g.h {
                    let dst = &mut row[y * g.w..(y + 1) * g.w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize || x0 == x1 {
                        dst.fill(zero);
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    dst[..x0].fill(zero);
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    dst[x1..].fill(zero);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a `(Cin*k*k, H*W)` matrix back into an image.
fn col2im<T: Float>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let n = g.plane();
    for ci in 0..g.cin {
        let plane = &mut img[ci * n..(ci + 1) * n];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * n..(r + 1) * n];
                let (dy, dx) = g.tap(ky, kx);
                let (x0, x1) = g.valid_cols(dx);
                if x0 == x1 {
                    continue;
                }
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let src = &row[y * g.w + x0..y * g.w + x1];
                    let s0 = sy as usize * g.w + (x0 as isize + dx) as usize;
                    for (d, &v) in plane[s0..s0 + (x1 - x0)].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Element types the convolution kernels run on.
pub trait Float: WithDType {
    /// Row-major GEMM `dst (m x n) = beta * dst + lhs (m x k) * rhs (k x n)` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, n: usize, k: usize, dst: &mut [Self], beta: f64, lhs: &[Self], lhs_s: (usize, usize), rhs: &[Self], rhs_s: (usize, usize));
}

macro_rules! impl_float {
    ($t:ty, $f:path) => {
        impl Float for $t {
            fn gemm(m: usize, n: usize, k: usize, dst: &mut [Self], beta: f64, lhs: &[Self], lhs_s: (usize, usize), rhs: &[Self], rhs_s: (usize, usize)) {
                assert!(dst.len() >= m * n);
                assert!(m == 0 || k == 0 || lhs.len() > (m - 1) * lhs_s.0 + (k - 1) * lhs_s.1);
                assert!(k == 0 || n == 0 || rhs.len() > (k - 1) * rhs_s.0 + (n - 1) * rhs_s.1);
                // SAFETY: the asserts above bound every index the kernel touches;
                // dst does not alias lhs or rhs.
                unsafe {
                    $f(
                        m, k, n, 1.0,
                        lhs.as_ptr(), lhs_s.0 as isize, lhs_s.1 as isize,
                        rhs.as_ptr(), rhs_s.0 as isize, rhs_s.1 as isize,
                        beta as $t, dst.as_mut_ptr(), n as isize, 1,
                    )
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

fn forward<T: Float>(g: &Geometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let n = g.plane();
    let kk = g.patch();
    let mut out = Vec::with_capacity(g.batch * g.cout * n);
    for _ in 0..g.batch {
        for &b in bias {
            out.extend(std::iter::repeat_n(b, n));
        }
    }
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::from_f64(0.0); kk * n] };
    for b in 0..g.batch {
        let img = &x[b * g.cin * n..(b + 1) * g.cin * n];
        let cols_ref: &[T] = if g.k == 1 {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let dst = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        T::gemm(g.cout, n, kk, dst, 1.0, w, (kk, 1), cols_ref, (n, 1));
    }
    out
}

fn input_grad<T: Float>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let n = g.plane();
    let kk = g.patch();
    let mut gx = vec![T::from_f64(0.0); g.batch * g.cin * n];
    let mut cols = vec![T::from_f64(0.0); kk * n];
    for b in 0..g.batch {
        let gout = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        let dst = &mut gx[b * g.cin * n..(b + 1) * g.cin * n];
        // cols = W^T (kk x cout) * gout (cout x n)
        if g.k == 1 {
            T::gemm(kk, n, g.cout, dst, 0.0, w, (1, kk), gout, (n, 1));
        } else {
            T::gemm(kk, n, g.cout, &mut cols, 0.0, w, (1, kk), gout, (n, 1));
            col2im(g, &cols, dst);
        }
    }
    gx
}

/// Packed `[dweight (cout*kk), dbias (cout)]`.
fn params_grad<T: Float>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let n = g.plane();
    let kk = g.patch();
    let mut gw = vec![T::from_f64(0.0); g.cout * kk];
    let mut gb = vec![0.0f64; g.cout];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::from_f64(0.0); kk * n] };
    for b in 0..g.batch {
        let img = &x[b * g.cin * n..(b + 1) * g.cin * n];
        let cols_ref: &[T] = if g.k == 1 {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let gout = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        // gw += gout (cout x n) * cols^T (n x kk)
        T::gemm(g.cout, kk, n, &mut gw, if b > 0 { 1.0 } else { 0.0 }, gout, (n, 1), cols_ref, (1, n));
        for (acc, row) in gb.iter_mut().zip(gout.chunks_exact(n)) {
            *acc += row.iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    gw.extend(gb.into_iter().map(T::from_f64));
    gw
}

fn geometry(lx: &Layout, lw: &Layout, dilation: usize) -> candle_core::Result<Geometry> {
    let (batch, cin, h, w) = lx.shape().dims4()?;
    let (cout, _, k, _) = lw.shape().dims4()?;
    Ok(Geometry { batch, cin, cout, h, w, k, dilation })
}

struct DilatedConv {
    dilation: usize,
}

impl CustomOp3 for DilatedConv {
    fn name(&self) -> &'static str {
        "dilated-conv2d"
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
        let g = geometry(l1, l2, self.dilation)?;
        let shape = Shape::from((g.batch, g.cout, g.h, g.w));
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wt), CpuStorage::F32(b)) => CpuStorage::F32(forward(
                &g,
                contiguous(x, l1, "conv input")?,
                contiguous(wt, l2, "conv weight")?,
                contiguous(b, l3, "conv bias")?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(wt), CpuStorage::F64(b)) => CpuStorage::F64(forward(
                &g,
                contiguous(x, l1, "conv input")?,
                contiguous(wt, l2, "conv weight")?,
                contiguous(b, l3, "conv bias")?,
            )),
            _ => candle_core::bail!("dilated-conv2d: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(weight, &ConvInputGrad { dilation: self.dilation })?;
        let k = weight.dim(2)?;
        let packed = x.apply_op2_no_bwd(&grad, &ConvParamsGrad { dilation: self.dilation, k })?;
        let nw = weight.elem_count();
        let gw = packed.narrow(0, 0, nw)?.reshape(weight.shape())?;
        let gb = packed.narrow(0, nw, bias.elem_count())?.reshape(bias.shape())?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

struct ConvInputGrad {
    dilation: usize,
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "dilated-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, cout, h, w) = l1.shape().dims4()?;
        let (_, cin, k, _) = l2.shape().dims4()?;
        let g = Geometry { batch, cin, cout, h, w, k, dilation: self.dilation };
        let shape = Shape::from((batch, cin, h, w));
        let out = match (s1, s2) {
            (CpuStorage::F32(gr), CpuStorage::F32(wt)) => CpuStorage::F32(input_grad(
                &g,
                contiguous(gr, l1, "grad")?,
                contiguous(wt, l2, "weight")?,
            )),
            (CpuStorage::F64(gr), CpuStorage::F64(wt)) => CpuStorage::F64(input_grad(
                &g,
                contiguous(gr, l1, "grad")?,
                contiguous(wt, l2, "weight")?,
            )),
            _ => candle_core::bail!("dilated-conv2d-input-grad: unsupported dtypes"),
        };
        Ok((out, shape))
    }
}

struct ConvParamsGrad {
    dilation: usize,
    k: usize,
}

impl CustomOp2 for ConvParamsGrad {
    fn name(&self) -> &'static str {
        "dilated-conv2d-params-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, cin, h, w) = l1.shape().dims4()?;
        let (_, cout, _, _) = l2.shape().dims4()?;
        let g = Geometry { batch, cin, cout, h, w, k: self.k, dilation: self.dilation };
        let shape = Shape::from(cout * g.patch() + cout);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(gr)) => CpuStorage::F32(params_grad(
                &g,
                contiguous(x, l1, "input")?,
                contiguous(gr, l2, "grad")?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(gr)) => CpuStorage::F64(params_grad(
                &g,
                contiguous(x, l1, "input")?,
                contiguous(gr, l2, "grad")?,
            )),
            _ => candle_core::bail!("dilated-conv2d-params-grad: unsupported dtypes"),
        };
        Ok((out, shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn reference(x: &Tensor, w: &Tensor, b: &Tensor, d: usize) -> Tensor {
        let k = w.dim(2).unwrap();
        let y = x.conv2d(w, d * (k - 1) / 2, 1, d, 1).unwrap();
        y.broadcast_add(&b.reshape((1, (), 1, 1)).unwrap()).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_conv_forward_and_backward() {
        let dev = Device::Cpu;
        for &(k, d) in &[(3usize, 1usize), (3, 2), (3, 6), (1, 1), (3, 9)] {
            let x = Var::randn(0f64, 1., (2, 3, 7, 9), &dev).unwrap();
            let w = Var::randn(0f64, 1., (4, 3, k, k), &dev).unwrap();
            let b = Var::randn(0f64, 1., 4, &dev).unwrap();
            let ours = conv2d_same(&x, &w, &b, d).unwrap();
            let theirs = reference(&x, &w, &b, d);
            assert!(max_diff(&ours, &theirs) < 1e-10, "forward k={k} d={d}");

            let probe = Tensor::randn(0f64, 1., ours.shape(), &dev).unwrap();
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-9, "dx k={k} d={d}");
            assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-9, "dw k={k} d={d}");
            assert!(max_diff(g1.get(&b).unwrap(), g2.get(&b).unwrap()) < 1e-9, "db k={k} d={d}");
        }
    }

    #[test]
    fn preserves_spatial_size_for_large_dilation() {
        let x = Tensor::zeros((1, 2, 5, 5), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::ones((3, 2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let y = conv2d_same(&x, &w, &Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap(), 22).unwrap();
        assert_eq!(y.dims(), &[1, 3, 5, 5]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros((1, 2, 5, 5), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::ones((3, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(conv2d_same(&x, &w, &Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap(), 1), Err(Error::Shape(_))));
    }
}
