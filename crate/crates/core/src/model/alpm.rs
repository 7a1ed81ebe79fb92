//! Attention-enhanced local processing.

use candle_core::Tensor;

use super::attention::SelfAttention;
use super::blocks::ConvStack;
use crate::error::{Error, Result};
use crate::nn::{max_pool2d, resize_bilinear, Scope};

pub struct AlpmParts {
    /// Input after the first 2×2 max-pool.
    pub fx: Tensor,
    /// Features at quarter resolution, where attention runs.
    pub feat: Tensor,
    pub attention: Tensor,
    pub fy: Tensor,
    pub out: Tensor,
}

#[derive(Clone)]
pub struct Alpm {
    pub entry: ConvStack,
    pub attention: SelfAttention,
    pub merge: ConvStack,
    pub local: ConvStack,
    site: String,
}

impl Alpm {
    pub fn new(scope: &Scope, cin: usize, channels: usize, dk: usize) -> Result<Self> {
        Ok(Self {
            entry: ConvStack::batch(&scope.sub("entry"), cin, channels, 1)?,
            attention: SelfAttention::new(&scope.sub("attn"), channels, dk)?,
            merge: ConvStack::batch(&scope.sub("merge"), channels + cin, channels, 1)?,
            local: ConvStack::batch(&scope.sub("local"), cin, channels, 1)?,
            site: scope.path().to_string(),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_parts(x, train)?.out)
    }

    pub fn forward_parts(&self, x: &Tensor, train: bool) -> Result<AlpmParts> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Precondition(format!(
                "{}: input {h}x{w} is not divisible by 4",
                self.site
            )));
        }
        let fx = max_pool2d(x, 2)?;
        let feat = self.entry.forward(&max_pool2d(&fx, 2)?, train)?;
        let attention = self.attention.forward(&feat, &self.site)?;
        let up = resize_bilinear(&(&feat + &attention)?, h / 2, w / 2)?;
        let fy = self.merge.forward(&Tensor::cat(&[&up, &fx], 1)?, train)?;
        let out = (self.local.forward(&fx, train)? + &fy)?;
        Ok(AlpmParts { fx, feat, attention, fy, out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::blocks::zero_conv;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn shape_trace() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        let m = Alpm::new(&s.root(), 3, 8, 8).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 96, 96), &Device::Cpu).unwrap();
        let p = m.forward_parts(&x, false).unwrap();
        assert_eq!(p.attention.dims(), &[1, 8, 24, 24]);
        assert_eq!(p.out.dims(), &[1, 8, 48, 48]);
    }

    #[test]
    fn zero_value_conv_removes_attention() {
        let s = ParamStore::new(1, DType::F64, Device::Cpu);
        let m = Alpm::new(&s.root(), 3, 8, 8).unwrap();
        zero_conv(&m.attention.value).unwrap();
        let x = Tensor::rand(0f64, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let p = m.forward_parts(&x, false).unwrap();

        // reference path with no attention at all
        let fx = max_pool2d(&x, 2).unwrap();
        let feat = m.entry.forward(&max_pool2d(&fx, 2).unwrap(), false).unwrap();
        let up = resize_bilinear(&feat, 16, 16).unwrap();
        let fy = m.merge.forward(&Tensor::cat(&[&up, &fx], 1).unwrap(), false).unwrap();
        let d = (fy - &p.fy).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn rejects_indivisible_input() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        let m = Alpm::new(&s.root(), 3, 8, 8).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 30, 32), &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&x, false), Err(Error::Precondition(_))));
    }
}
