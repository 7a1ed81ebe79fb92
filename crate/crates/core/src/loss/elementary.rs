//! Differentiable per-head loss terms over `(B, 1, H, W)` maps.
//!
//! Pixel losses are averaged over all pixels; the region losses (IoU, dice)
//! are computed per image and averaged over the batch.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const IOU_EPS: f64 = 1e-6;
pub const DICE_EPS: f64 = 1.0;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-image sums over every non-batch axis, shape `(B,)`.
fn image_sums(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.sum(1)?)
}

/// Binary cross-entropy on logits, per pixel:
/// `max(x, 0) − x·g + ln(1 + e^{−|x|})`.
pub fn bce_with_logits_map(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(logits, gt, "bce")?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((logits.relu()? - (logits * gt)?)? + soft)?)
}

/// Mean of `alpha · BCE(σ(logits), gt)`.
pub fn weighted_bce(logits: &Tensor, gt: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    same_shape(logits, alpha, "bce weights")?;
    Ok((bce_with_logits_map(logits, gt)? * alpha)?.mean_all()?)
}

/// `1 − (Σ α·p·g + ε) / (Σ α·(p + g − p·g) + ε)` per image, batch mean.
pub fn weighted_iou(probs: &Tensor, gt: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    same_shape(probs, gt, "iou")?;
    same_shape(probs, alpha, "iou weights")?;
    let pg = (probs * gt)?;
    let inter = image_sums(&(&pg * alpha)?)?;
    let union = image_sums(&(((probs + gt)? - &pg)? * alpha)?)?;
    let ratio = ((inter + IOU_EPS)? / (union + IOU_EPS)?)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// Mean of `α·|p − g|`.
pub fn weighted_l1(probs: &Tensor, gt: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    same_shape(probs, gt, "l1")?;
    same_shape(probs, alpha, "l1 weights")?;
    Ok(((probs - gt)?.abs()? * alpha)?.mean_all()?)
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` per image, batch mean.
pub fn dice_loss(probs: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(probs, gt, "dice")?;
    let inter = image_sums(&(probs * gt)?)?;
    let total = (image_sums(probs)? + image_sums(gt)?)?;
    let ratio = ((inter * 2.0)? + DICE_EPS)?.div(&(total + DICE_EPS)?)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn bce_at_half() {
        let z = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let g = (z.ones_like().unwrap() * 0.5).unwrap();
        let a = z.ones_like().unwrap();
        assert!((scalar(weighted_bce(&z, &g, &a).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_annihilates() {
        let x = candle_core::Var::randn(0f64, 2., (1, 1, 5, 5), &Device::Cpu).unwrap();
        let g = Tensor::rand(0f64, 1., (1, 1, 5, 5), &Device::Cpu).unwrap();
        let a = g.zeros_like().unwrap();
        let loss = weighted_bce(&x, &g, &a).unwrap();
        assert_eq!(scalar(loss.clone()), 0.0);
        let grad = loss.backward().unwrap();
        let gx = grad.get(&x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(scalar(gx), 0.0);
    }

    #[test]
    fn iou_extremes() {
        let g = t(&[1., 0., 1., 1.], (1, 1, 2, 2));
        let ones = g.ones_like().unwrap();
        assert!(scalar(weighted_iou(&g, &g, &ones).unwrap()).abs() < 1e-9);
        let inv = (1.0 - &g).unwrap();
        assert!((scalar(weighted_iou(&inv, &g, &ones).unwrap()) - 1.0).abs() < 1e-6);
        let z = g.zeros_like().unwrap();
        assert_eq!(scalar(weighted_iou(&z, &z, &z).unwrap()), 0.0);
    }

    #[test]
    fn l1_extremes() {
        let g = t(&[0., 0., 0., 0.], (1, 1, 2, 2));
        let ones = g.ones_like().unwrap();
        assert_eq!(scalar(weighted_l1(&g, &g, &ones).unwrap()), 0.0);
        assert_eq!(scalar(weighted_l1(&ones, &g, &ones).unwrap()), 1.0);
    }

    #[test]
    fn dice_closed_forms() {
        let ones = Tensor::ones((1, 1, 10, 10), DType::F64, &Device::Cpu).unwrap();
        assert!(scalar(dice_loss(&ones, &ones).unwrap()).abs() < 1e-12);
        let z = ones.zeros_like().unwrap();
        let got = scalar(dice_loss(&z, &ones).unwrap());
        assert!((got - (1.0 - 1.0 / 101.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(weighted_bce(&a, &b, &a), Err(Error::Shape(_))));
        assert!(matches!(dice_loss(&a, &b), Err(Error::Shape(_))));
    }
}
