use candle_core::Tensor;

use super::blocks::ConvStack;
use super::fusion::Mrffam;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Scope};

/// The aggregation path run alongside the identity path.
#[derive(Clone)]
pub enum Aggregation {
    Mrffam(Mrffam),
    /// Plain conv stand-in used when the aggregation module is ablated.
    Plain(ConvStack),
}

impl Aggregation {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Aggregation::Mrffam(m) => m.forward(x, train),
            Aggregation::Plain(b) => b.forward(x, train),
        }
    }
}

pub struct DecoderParts {
    /// Output of the aggregation path alone.
    pub aggregated: Tensor,
    /// Output of the stage at skip resolution.
    pub out: Tensor,
}

/// Aggregation + identity, upsample ×2, concatenate the skip, refine.
#[derive(Clone)]
pub struct DecoderStage {
    pub aggregate: Aggregation,
    pub refine: ConvStack,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &Scope,
        cin: usize,
        skip: usize,
        out: usize,
        dilations: &[usize],
        groups: usize,
        depth: usize,
        ablate: bool,
    ) -> Result<Self> {
        let aggregate = if ablate {
            Aggregation::Plain(ConvStack::batch(&scope.sub("plain"), cin, cin, 1)?)
        } else {
            Aggregation::Mrffam(Mrffam::new(&scope.sub("mrffam"), cin, dilations, groups)?)
        };
        Ok(Self {
            aggregate,
            refine: ConvStack::group_deep(&scope.sub("refine"), cin + skip, out, 1, groups, depth)?,
        })
    }

    pub fn forward_parts(&self, x: &Tensor, skip: &Tensor, train: bool) -> Result<DecoderParts> {
        let (b, _, h, w) = x.dims4()?;
        let (sb, _, sh, sw) = skip.dims4()?;
        if sb != b || sh != 2 * h || sw != 2 * w {
            return Err(Error::Shape(format!(
                "decoder skip {:?} is not twice the size of input {:?}",
                skip.dims(),
                x.dims()
            )));
        }
        let aggregated = self.aggregate.forward(x, train)?;
        let merged = (&aggregated + x)?;
        let up = resize_bilinear(&merged, sh, sw)?;
        let out = self.refine.forward(&Tensor::cat(&[&up, skip], 1)?, train)?;
        Ok(DecoderParts { aggregated, out })
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_parts(x, skip, train)?.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::blocks::zero_conv;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn stage(store: &ParamStore) -> DecoderStage {
        DecoderStage::new(&store.root(), 16, 8, 8, &[2, 4, 6, 8], 4, 2, false).unwrap()
    }

    #[test]
    fn upsample_contract() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        let d = stage(&s);
        let x = Tensor::rand(0f32, 1., (1, 16, 24, 24), &Device::Cpu).unwrap();
        let skip = Tensor::rand(0f32, 1., (1, 8, 48, 48), &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x, &skip, false).unwrap().dims(), &[1, 8, 48, 48]);
        let bad = Tensor::rand(0f32, 1., (1, 8, 40, 48), &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x, &bad, false), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_aggregation_leaves_identity_path() {
        let s = ParamStore::new(1, DType::F64, Device::Cpu);
        let d = stage(&s);
        let Aggregation::Mrffam(m) = &d.aggregate else { unreachable!() };
        zero_conv(&m.refine.units[1].conv).unwrap();
        let x = Tensor::randn(0f64, 1., (1, 16, 6, 6), &Device::Cpu).unwrap();
        let skip = Tensor::randn(0f64, 1., (1, 8, 12, 12), &Device::Cpu).unwrap();
        let got = d.forward(&x, &skip, false).unwrap();
        let up = resize_bilinear(&x, 12, 12).unwrap();
        let want = d.refine.forward(&Tensor::cat(&[&up, &skip], 1).unwrap(), false).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
