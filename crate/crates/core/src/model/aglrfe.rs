//! Attention-guided long-range feature extraction.

use candle_core::Tensor;

use super::attention::SelfAttention;
use super::blocks::ConvStack;
use crate::error::{Error, Result};
use crate::nn::{max_pool2d, resize_bilinear, Scope};

/// Intermediate tensors of one forward pass, exposed for inspection.
pub struct AglrfeParts {
    pub feat: Tensor,
    pub attention: Tensor,
    pub gate: Tensor,
    /// Dilated branch outputs before gating, one per dilation.
    pub branches: Vec<Tensor>,
    pub gated: Vec<Tensor>,
    pub out: Tensor,
}

#[derive(Clone)]
pub struct Aglrfe {
    pub entry: ConvStack,
    pub attn_pre: ConvStack,
    pub attention: SelfAttention,
    pub gate: ConvStack,
    pub branches: Vec<ConvStack>,
    pub fuse: ConvStack,
    pub pool_stride: usize,
    site: String,
}

impl Aglrfe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &Scope,
        cin: usize,
        channels: usize,
        dilations: &[usize],
        pool_stride: usize,
        dk: usize,
        groups: usize,
    ) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::Config(format!("{}: empty dilation list", scope.path())));
        }
        let branches = dilations
            .iter()
            .map(|&d| ConvStack::group(&scope.sub(format!("branch{d}")), channels, channels, d, groups))
            .collect::<Result<_>>()?;
        Ok(Self {
            entry: ConvStack::batch(&scope.sub("entry"), cin, channels, 1)?,
            attn_pre: ConvStack::batch(&scope.sub("attn_pre"), channels, channels, 1)?,
            attention: SelfAttention::new(&scope.sub("attn"), channels, dk)?,
            gate: ConvStack::batch(&scope.sub("gate"), channels, 1, 1)?,
            branches,
            fuse: ConvStack::batch(&scope.sub("fuse"), channels * (dilations.len() + 1), channels, 1)?,
            pool_stride,
            site: scope.path().to_string(),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_parts(x, train)?.out)
    }

    pub fn forward_parts(&self, x: &Tensor, train: bool) -> Result<AglrfeParts> {
        let feat = self.entry.forward(x, train)?;
        let (_, _, h, w) = feat.dims4()?;
        let pooled = feat.avg_pool2d(self.pool_stride)?;
        let attention = self
            .attention
            .forward(&self.attn_pre.forward(&pooled, train)?, &self.site)?;
        let up = resize_bilinear(&attention, h, w)?;
        let gate = candle_nn::ops::sigmoid(&self.gate.forward(&up, train)?)?;

        let mut branches = Vec::with_capacity(self.branches.len());
        let mut gated = Vec::with_capacity(self.branches.len());
        for block in &self.branches {
            let f = block.forward(&feat, train)?;
            gated.push((&f + f.broadcast_mul(&gate)?)?);
            branches.push(f);
        }
        let mut all: Vec<&Tensor> = gated.iter().collect();
        all.push(&feat);
        let merged = max_pool2d(&Tensor::cat(&all, 1)?, 2)?;
        let out = self.fuse.forward(&merged, train)?;
        Ok(AglrfeParts { feat, attention, gate, branches, gated, out })
    }
}
