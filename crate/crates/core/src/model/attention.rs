use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Scope};

/// Row-wise softmax over the last axis. The shift is detached; softmax is
/// invariant to it, so only the exponentials carry gradient.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

/// Query rows per attention block.
pub const QUERY_BLOCK: usize = 1024;

fn check_finite(scores: &Tensor, site: &str) -> Result<()> {
    let total = scores.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::NonFinite { site: format!("{site} attention logits") });
    }
    Ok(())
}

/// Single-head scaled dot-product self-attention over flattened pixels, with
/// keys, queries and values from independent 3×3 convolutions.
#[derive(Clone)]
pub struct SelfAttention {
    pub key: Conv2d,
    pub query: Conv2d,
    pub value: Conv2d,
    pub dk: usize,
}

impl SelfAttention {
    pub fn new(scope: &Scope, channels: usize, dk: usize) -> Result<Self> {
        Ok(Self {
            key: Conv2d::new(&scope.sub("key"), channels, dk, 3, 1)?,
            query: Conv2d::new(&scope.sub("query"), channels, dk, 3, 1)?,
            value: Conv2d::new(&scope.sub("value"), channels, channels, 3, 1)?,
            dk,
        })
    }

    /// Output map, evaluated in blocks of query rows so that memory grows with
    /// `QUERY_BLOCK * N` instead of `N * N`.
    pub fn forward(&self, x: &Tensor, site: &str) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        if n <= QUERY_BLOCK {
            return Ok(self.forward_with_weights(x, site)?.0);
        }
        let q = self.query.forward(x)?.reshape((b, self.dk, n))?.transpose(1, 2)?.contiguous()?;
        let k = self.key.forward(x)?.reshape((b, self.dk, n))?;
        let v = self.value.forward(x)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let scale = (self.dk as f64).sqrt();
        let mut blocks = Vec::with_capacity(n.div_ceil(QUERY_BLOCK));
        for start in (0..n).step_by(QUERY_BLOCK) {
            let len = QUERY_BLOCK.min(n - start);
            let scores = (q.narrow(1, start, len)?.matmul(&k)? / scale)?;
            check_finite(&scores, site)?;
            blocks.push(softmax_rows(&scores)?.matmul(&v)?);
        }
        Ok(Tensor::cat(&blocks, 1)?.transpose(1, 2)?.reshape((b, c, h, w))?)
    }

    /// Output map and the `(B, N, N)` attention matrix.
    pub fn forward_with_weights(&self, x: &Tensor, site: &str) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let q = self.query.forward(x)?.reshape((b, self.dk, n))?.transpose(1, 2)?.contiguous()?;
        let k = self.key.forward(x)?.reshape((b, self.dk, n))?;
        let scores = (q.matmul(&k)? / (self.dk as f64).sqrt())?;
        check_finite(&scores, site)?;
        let weights = softmax_rows(&scores)?;
        let v = self.value.forward(x)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn rows_sum_to_one() {
        let s = ParamStore::new(1, DType::F32, Device::Cpu);
        let att = SelfAttention::new(&s.root(), 8, 8).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 8, 6, 6), &Device::Cpu).unwrap();
        let (_, wts) = att.forward_with_weights(&x, "test").unwrap();
        let sums: Vec<f32> = wts.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(sums.len(), 36);
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn constant_values_pass_through() {
        let s = ParamStore::new(2, DType::F64, Device::Cpu);
        let att = SelfAttention::new(&s.root(), 4, 4).unwrap();
        att.value.weight.set(&att.value.weight.zeros_like().unwrap()).unwrap();
        att.value.bias.set(&(att.value.bias.ones_like().unwrap() * 0.7).unwrap()).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 4, 5, 5), &Device::Cpu).unwrap();
        let y: Vec<f64> = att.forward(&x, "test").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn matches_dense_oracle_with_identity_projections() {
        let dev = Device::Cpu;
        let s = ParamStore::new(3, DType::F64, dev.clone());
        let c = 3;
        let att = SelfAttention::new(&s.root(), c, c).unwrap();
        let mut eye = vec![0.0f64; c * c * 9];
        for i in 0..c {
            eye[(i * c + i) * 9 + 4] = 1.0;
        }
        let eye = Tensor::from_vec(eye, (c, c, 3, 3), &dev).unwrap();
        for conv in [&att.key, &att.query, &att.value] {
            conv.weight.set(&eye).unwrap();
            conv.bias.set(&conv.bias.zeros_like().unwrap()).unwrap();
        }
        let data: Vec<f64> = (0..c * 4).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
        let x = Tensor::from_vec(data.clone(), (1, c, 2, 2), &dev).unwrap();
        let y: Vec<f64> = att.forward(&x, "test").unwrap().flatten_all().unwrap().to_vec1().unwrap();

        let tok = |p: usize, ch: usize| data[ch * 4 + p];
        for p in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|r| (0..c).map(|ch| tok(p, ch) * tok(r, ch)).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for ch in 0..c {
                let want: f64 = (0..4).map(|r| logits[r].exp() / z * tok(r, ch)).sum();
                assert!((y[ch * 4 + p] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blocked_forward_matches_dense() {
        let s = ParamStore::new(5, DType::F64, Device::Cpu);
        let att = SelfAttention::new(&s.root(), 3, 4).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 3, 40, 30), &Device::Cpu).unwrap();
        let blocked = att.forward(&x, "test").unwrap();
        let dense = att.forward_with_weights(&x, "test").unwrap().0;
        let d: f64 = (blocked - dense).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn non_finite_logits_are_reported() {
        let s = ParamStore::new(4, DType::F32, Device::Cpu);
        let att = SelfAttention::new(&s.root(), 2, 2).unwrap();
        let x = (Tensor::ones((1, 2, 3, 3), DType::F32, &Device::Cpu).unwrap() * 1e30).unwrap();
        match att.forward(&x, "alpm1") {
            Err(Error::NonFinite { site }) => assert!(site.contains("alpm1")),
            other => panic!("expected non-finite error, got {:?}", other.map(|t| t.dims().to_vec())),
        }
    }
}
