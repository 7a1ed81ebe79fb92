use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, GroupNorm, Scope};

#[derive(Clone)]
enum Norm {
    Batch(BatchNorm2d),
    Group(GroupNorm),
}

/// 3×3 dilated conv → normalization → GELU.
#[derive(Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    norm: Norm,
}

impl ConvUnit {
    pub fn batch(scope: &Scope, cin: usize, cout: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.sub("conv"), cin, cout, 3, dilation)?,
            norm: Norm::Batch(BatchNorm2d::new(&scope.sub("bn"), cout)?),
        })
    }

    pub fn group(scope: &Scope, cin: usize, cout: usize, dilation: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.sub("conv"), cin, cout, 3, dilation)?,
            norm: Norm::Group(GroupNorm::new(&scope.sub("gn"), cout, groups)?),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.norm {
            Norm::Batch(bn) => bn.forward_act(&y, train, true),
            Norm::Group(gn) => gn.forward_act(&y, true),
        }
    }
}

/// A chain of [`ConvUnit`]s; the first maps `cin → cout`, the rest keep `cout`.
#[derive(Clone)]
pub struct ConvStack {
    pub units: Vec<ConvUnit>,
}

impl ConvStack {
    /// Two batch-normalized units at one dilation.
    pub fn batch(scope: &Scope, cin: usize, cout: usize, dilation: usize) -> Result<Self> {
        let units = (0..2)
            .map(|i| ConvUnit::batch(&scope.sub(i), if i == 0 { cin } else { cout }, cout, dilation))
            .collect::<Result<_>>()?;
        Ok(Self { units })
    }

    /// Two group-normalized units at one dilation.
    pub fn group(scope: &Scope, cin: usize, cout: usize, dilation: usize, groups: usize) -> Result<Self> {
        Self::group_deep(scope, cin, cout, dilation, groups, 2)
    }

    pub fn group_deep(
        scope: &Scope,
        cin: usize,
        cout: usize,
        dilation: usize,
        groups: usize,
        depth: usize,
    ) -> Result<Self> {
        let units = (0..depth)
            .map(|i| {
                ConvUnit::group(&scope.sub(i), if i == 0 { cin } else { cout }, cout, dilation, groups)
            })
            .collect::<Result<_>>()?;
        Ok(Self { units })
    }

    pub fn out_channels(&self) -> usize {
        self.units.last().map_or(0, |u| u.conv.out_channels)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for unit in &self.units {
            y = unit.forward(&y, train)?;
        }
        Ok(y)
    }
}

/// 1×1 projection of a feature map to one logit channel.
#[derive(Clone)]
pub struct Head {
    pub conv: Conv2d,
}

impl Head {
    pub fn new(scope: &Scope, cin: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(scope, cin, 1, 1, 1)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

/// Zero a conv's weight and bias in place.
pub fn zero_conv(conv: &Conv2d) -> Result<()> {
    conv.weight.set(&conv.weight.zeros_like()?)?;
    conv.bias.set(&conv.bias.zeros_like()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(3, DType::F64, Device::Cpu)
    }

    #[test]
    fn batch_block_keeps_spatial_size() {
        let s = store();
        let x = Tensor::rand(0f64, 1., (1, 16, 32, 32), &Device::Cpu).unwrap();
        for d in [1, 22] {
            let b = ConvStack::batch(&s.root().sub(d), 16, 8, d).unwrap();
            assert_eq!(b.forward(&x, false).unwrap().dims(), &[1, 8, 32, 32]);
        }
    }

    #[test]
    fn zero_input_gives_constant_map_in_eval() {
        let s = store();
        let b = ConvStack::batch(&s.root(), 4, 6, 1).unwrap();
        let x = Tensor::zeros((1, 4, 10, 10), DType::F64, &Device::Cpu).unwrap();
        let y = b.forward(&x, false).unwrap();
        // zero bias: each unit maps 0 to gelu(0 / sqrt(1 + eps)) = 0
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| a == v[0]));
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn group_block_has_no_cross_sample_coupling() {
        let s = store();
        let b = ConvStack::group(&s.root(), 8, 8, 6, 4).unwrap();
        let dev = Device::Cpu;
        let a = Tensor::rand(0f64, 1., (1, 8, 24, 24), &dev).unwrap();
        let c = Tensor::rand(0f64, 1., (1, 8, 24, 24), &dev).unwrap();
        let ac = b.forward(&Tensor::cat(&[&a, &c], 0).unwrap(), true).unwrap();
        let ca = b.forward(&Tensor::cat(&[&c, &a], 0).unwrap(), true).unwrap();
        let diff = (ac.narrow(0, 0, 1).unwrap() - ca.narrow(0, 1, 1).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(ac.dims(), &[2, 8, 24, 24]);
    }

    #[test]
    fn group_norm_statistics() {
        let s = store();
        let gn = GroupNorm::new(&s.root(), 8, 4).unwrap();
        let x = (Tensor::rand(0f64, 5., (2, 8, 6, 6), &Device::Cpu).unwrap() + 3.0).unwrap();
        let y = gn.normalize(&x).unwrap().reshape((2, 4, 72)).unwrap();
        let mean: Vec<Vec<f64>> = y.mean(2).unwrap().to_vec2().unwrap();
        let var: Vec<Vec<f64>> = y.sqr().unwrap().mean(2).unwrap().to_vec2().unwrap();
        for (m, v) in mean.iter().flatten().zip(var.iter().flatten()) {
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
