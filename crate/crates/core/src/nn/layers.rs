use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor, Var};

use super::conv::conv2d_same;
use super::norm_act::{norm_act, Moments, Stats};
use super::params::{Role, Scope};
use crate::error::{Error, Result};

/// Square "same"-padded convolution with bias.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "{}: conv channels must be positive ({in_channels} -> {out_channels})",
                scope.path()
            )));
        }
        if dilation == 0 {
            return Err(Error::Config(format!("{}: dilation must be >= 1", scope.path())));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = scope.he_normal("weight", &[out_channels, in_channels, kernel, kernel], fan_in)?;
        let bias = scope.constant("bias", &[out_channels], 0.0, Role::Trainable)?;
        Ok(Self { weight, bias, dilation, in_channels, out_channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_same(x, &self.weight, &self.bias, self.dilation)
    }
}

/// Batch normalization over `(B, H, W)` per channel, with running statistics for eval mode.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.constant("weight", &[channels], 1.0, Role::Trainable)?,
            bias: scope.constant("bias", &[channels], 0.0, Role::Trainable)?,
            running_mean: scope.constant("running_mean", &[channels], 0.0, Role::Buffer)?,
            running_var: scope.constant("running_var", &[channels], 1.0, Role::Buffer)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.forward_act(x, train, false)
    }

    /// Normalize, apply the affine transform and optionally GELU in one fused op.
    pub fn forward_act(&self, x: &Tensor, train: bool, gelu: bool) -> Result<Tensor> {
        if !train {
            let stats = Stats::Fixed {
                mean: self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1()?,
                var: self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1()?,
            };
            return norm_act(x, &self.weight, &self.bias, stats, self.eps, gelu, None);
        }
        let (b, _, h, w) = x.dims4()?;
        let slot = Arc::new(Mutex::new(Moments::default()));
        let y = norm_act(x, &self.weight, &self.bias, Stats::Batch, self.eps, gelu, Some(slot.clone()))?;
        let moments = slot.lock().map_err(|_| Error::Precondition("moments lock poisoned".into()))?.clone();
        let n = (b * h * w) as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        let update = |var: &Var, fresh: Vec<f64>| -> Result<()> {
            let fresh = Tensor::from_vec(fresh, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&((var.as_tensor() * (1.0 - m))? + (fresh * m)?)?)?;
            Ok(())
        };
        update(&self.running_mean, moments.mean)?;
        update(&self.running_var, moments.var.iter().map(|v| v * unbiased).collect())?;
        Ok(y)
    }
}

/// Group normalization: per sample, statistics over each group of channels and all pixels.
#[derive(Clone)]
pub struct GroupNorm {
    pub weight: Var,
    pub bias: Var,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &Scope, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{}: {channels} channels not divisible into {groups} groups",
                scope.path()
            )));
        }
        Ok(Self {
            weight: scope.constant("weight", &[channels], 1.0, Role::Trainable)?,
            bias: scope.constant("bias", &[channels], 0.0, Role::Trainable)?,
            groups,
            eps: 1e-5,
        })
    }

    /// Normalized activations before the affine transform.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let out = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(out.reshape((b, c, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_act(x, false)
    }

    /// Normalize, apply the affine transform and optionally GELU in one fused op.
    pub fn forward_act(&self, x: &Tensor, gelu: bool) -> Result<Tensor> {
        norm_act(x, &self.weight, &self.bias, Stats::Group(self.groups), self.eps, gelu, None)
    }
}
