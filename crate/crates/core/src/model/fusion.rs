//! Cross-feature fusion and multi-receptive-field aggregation.

use candle_core::Tensor;

use super::blocks::ConvStack;
use crate::error::{Error, Result};
use crate::nn::Scope;

/// Merges the global and local encoder branches.
#[derive(Clone)]
pub struct Cfm {
    pub stack: ConvStack,
}

impl Cfm {
    pub fn new(scope: &Scope, global: usize, local: usize, out: usize, depth: usize, groups: usize) -> Result<Self> {
        Ok(Self { stack: ConvStack::group_deep(scope, global + local, out, 1, groups, depth)? })
    }

    pub fn forward(&self, global: &Tensor, local: &Tensor) -> Result<Tensor> {
        let (g, l) = (global.dims4()?, local.dims4()?);
        if (g.0, g.2, g.3) != (l.0, l.2, l.3) {
            return Err(Error::Shape(format!(
                "cross-feature inputs disagree: global {:?}, local {:?}",
                global.dims(),
                local.dims()
            )));
        }
        self.stack.forward(&Tensor::cat(&[global, local], 1)?, false)
    }
}

/// Channel-chunked dilated convolutions concatenated with their input.
#[derive(Clone)]
pub struct Mrffam {
    pub chunks: Vec<ConvStack>,
    pub refine: ConvStack,
    pub chunk_width: usize,
}

impl Mrffam {
    pub fn new(scope: &Scope, channels: usize, dilations: &[usize], groups: usize) -> Result<Self> {
        let k = dilations.len();
        if k == 0 || channels % k != 0 {
            return Err(Error::Config(format!(
                "{}: {channels} channels cannot split into {k} chunks",
                scope.path()
            )));
        }
        let width = channels / k;
        let chunks = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| ConvStack::group(&scope.sub(format!("chunk{i}")), width, width, d, groups))
            .collect::<Result<_>>()?;
        Ok(Self {
            chunks,
            refine: ConvStack::batch(&scope.sub("refine"), 2 * channels, channels, 1)?,
            chunk_width: width,
        })
    }

    /// Per-chunk outputs, in channel order.
    pub fn chunk_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let c = x.dim(1)?;
        if c != self.chunk_width * self.chunks.len() {
            return Err(Error::Shape(format!(
                "aggregation expects {} channels, got {c}",
                self.chunk_width * self.chunks.len()
            )));
        }
        self.chunks
            .iter()
            .enumerate()
            .map(|(i, block)| block.forward(&x.narrow(1, i * self.chunk_width, self.chunk_width)?, false))
            .collect()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut parts = self.chunk_outputs(x)?;
        parts.push(x.clone());
        self.refine.forward(&Tensor::cat(&parts, 1)?, train)
    }
}
