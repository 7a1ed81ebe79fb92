//! Head losses and the deeply supervised training objective.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::elementary::{bce_with_logits_map, dice_loss, weighted_bce, weighted_iou, weighted_l1};
use super::weights::{bg_ground_truth, fg_weight_map};
use crate::data::mask::{binarize, derive_contour};
use crate::error::{Error, Result};
use crate::model::{expected_heads, ForwardOutputs, HeadId, HeadKind, ModelConfig};
use crate::nn::resize_plane;

pub const CONTOUR_BCE_WEIGHT: f64 = 0.001;

/// Logits of the complementary (background) prediction.
pub fn background_logits(fg_logits: &Tensor) -> Result<Tensor> {
    Ok(fg_logits.neg()?)
}

/// Ground truth and weights aligned with one head resolution.
#[derive(Clone)]
pub struct ScaleTargets {
    pub gt: Tensor,
    pub alpha_fg: Tensor,
    pub alpha_bg: Tensor,
    pub contour: Tensor,
}

impl ScaleTargets {
    /// Targets from maps already at the head resolution, each `(B, 1, H, W)`.
    pub fn from_maps(gt: &[f32], contour: &[f32], b: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Self> {
        let hw = h * w;
        let mut fg = Vec::with_capacity(b * hw);
        for i in 0..b {
            fg.extend(fg_weight_map(&binarize(&gt[i * hw..(i + 1) * hw]), h, w));
        }
        let mk = |v: Vec<f32>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, 1, h, w), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            gt: mk(gt.to_vec())?,
            alpha_fg: mk(fg)?,
            alpha_bg: mk(bg_ground_truth(gt))?,
            contour: mk(contour.to_vec())?,
        })
    }

    pub fn dims(&self) -> &[usize] {
        self.gt.dims()
    }
}

/// Full-resolution ground truth with lazily built per-resolution targets.
///
/// Coarser heads see the bilinearly resized saliency map; their foreground
/// weights come from that map re-binarized at 0.5, and their contour band is
/// re-derived from the same binary map.
pub struct Targets {
    gt: Vec<f32>,
    contour: Vec<f32>,
    batch: usize,
    size: (usize, usize),
    dtype: DType,
    device: Device,
    cache: RefCell<HashMap<(usize, usize), ScaleTargets>>,
}

impl Targets {
    pub fn new(gt: &Tensor, contour: &Tensor, dtype: DType) -> Result<Self> {
        let (b, c, h, w) = gt.dims4()?;
        if c != 1 || contour.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "targets must be matching (B, 1, H, W) maps: gt {:?}, contour {:?}",
                gt.dims(),
                contour.dims()
            )));
        }
        let flat = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?) };
        Ok(Self {
            gt: flat(gt)?,
            contour: flat(contour)?,
            batch: b,
            size: (h, w),
            dtype,
            device: gt.device().clone(),
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.size
    }

    pub fn at(&self, h: usize, w: usize) -> Result<ScaleTargets> {
        if let Some(t) = self.cache.borrow().get(&(h, w)) {
            return Ok(t.clone());
        }
        let (fh, fw) = self.size;
        let t = if (h, w) == self.size {
            ScaleTargets::from_maps(&self.gt, &self.contour, self.batch, h, w, self.dtype, &self.device)?
        } else {
            let mut gt = Vec::with_capacity(self.batch * h * w);
            let mut contour = Vec::with_capacity(self.batch * h * w);
            for i in 0..self.batch {
                let src = &self.gt[i * fh * fw..(i + 1) * fh * fw];
                let small: Vec<f32> = resize_plane(src, fh, fw, h, w).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
                contour.extend(derive_contour(&binarize(&small), h, w));
                gt.extend(small);
            }
            ScaleTargets::from_maps(&gt, &contour, self.batch, h, w, self.dtype, &self.device)?
        };
        self.cache.borrow_mut().insert((h, w), t.clone());
        Ok(t)
    }
}

/// `weighted_bce + weighted_iou + weighted_l1` for one side of the prediction.
pub fn side_loss(logits: &Tensor, gt: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let probs = candle_nn::ops::sigmoid(logits)?;
    let bce = weighted_bce(logits, gt, alpha)?;
    let iou = weighted_iou(&probs, gt, alpha)?;
    let l1 = weighted_l1(&probs, gt, alpha)?;
    Ok(((bce + iou)? + l1)?)
}

pub struct SaliencyLoss {
    pub fg: Tensor,
    pub bg: Tensor,
    /// `fg + beta · bg`
    pub total: Tensor,
}

pub fn saliency_head_loss(fg_logits: &Tensor, t: &ScaleTargets, beta: f64) -> Result<SaliencyLoss> {
    let fg = side_loss(fg_logits, &t.gt, &t.alpha_fg)?;
    let bg_gt = t.gt.neg()?.affine(1.0, 1.0)?;
    let bg = side_loss(&background_logits(fg_logits)?, &bg_gt, &t.alpha_bg)?;
    let total = (&fg + (&bg * beta)?)?;
    Ok(SaliencyLoss { fg, bg, total })
}

/// `0.001 · BCE + dice`, unweighted.
pub fn contour_head_loss(logits: &Tensor, contour: &Tensor) -> Result<Tensor> {
    let bce = bce_with_logits_map(logits, contour)?.mean_all()?;
    let dice = dice_loss(&candle_nn::ops::sigmoid(logits)?, contour)?;
    Ok(((bce * CONTOUR_BCE_WEIGHT)? + dice)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub fg: f64,
    pub bg: f64,
    pub contour: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_head: BTreeMap<HeadId, HeadLoss>,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Total rebuilt from the per-head entries.
    pub fn recombine(&self) -> f64 {
        self.per_head
            .iter()
            .map(|(id, l)| match id.kind {
                HeadKind::Saliency => l.fg + self.beta * l.bg,
                HeadKind::Contour => l.contour,
            })
            .sum()
    }

    /// Flat `{"<head>.<component>": value, ..., "total": t, "beta": b}` record.
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (id, l) in &self.per_head {
            match id.kind {
                HeadKind::Saliency => {
                    m.insert(format!("{id}.fg"), l.fg.into());
                    m.insert(format!("{id}.bg"), l.bg.into());
                }
                HeadKind::Contour => {
                    m.insert(format!("{id}.contour"), l.contour.into());
                }
            }
        }
        m.insert("total".into(), self.total.into());
        m.insert("beta".into(), self.beta.into());
        serde_json::Value::Object(m)
    }
}

/// The summed loss over a fixed set of supervised heads.
#[derive(Debug, Clone)]
pub struct Objective {
    pub beta: f64,
    pub heads: BTreeSet<HeadId>,
}

impl Objective {
    pub fn for_config(cfg: &ModelConfig, beta: f64) -> Self {
        Self { beta, heads: expected_heads(cfg) }
    }

    pub fn evaluate(&self, outputs: &ForwardOutputs, targets: &Targets) -> Result<(Tensor, LossBreakdown)> {
        let mut total: Option<Tensor> = None;
        let mut per_head = BTreeMap::new();
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        for &id in &self.heads {
            let logits = outputs.get(id)?;
            let (_, _, h, w) = logits.dims4()?;
            let t = targets.at(h, w)?;
            if logits.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "head {id}: logits {:?}, targets {:?}",
                    logits.dims(),
                    t.dims()
                )));
            }
            let (loss, entry) = match id.kind {
                HeadKind::Saliency => {
                    let s = saliency_head_loss(logits, &t, self.beta)?;
                    let entry = HeadLoss { fg: scalar(&s.fg)?, bg: scalar(&s.bg)?, contour: 0.0 };
                    (s.total, entry)
                }
                HeadKind::Contour => {
                    let c = contour_head_loss(logits, &t.contour)?;
                    let entry = HeadLoss { contour: scalar(&c)?, ..HeadLoss::default() };
                    (c, entry)
                }
            };
            per_head.insert(id, entry);
            total = Some(match total {
                Some(acc) => (acc + loss)?,
                None => loss,
            });
        }
        let total = total.ok_or_else(|| Error::Config("objective has no heads".into()))?;
        let breakdown = LossBreakdown { per_head, total: scalar(&total)?, beta: self.beta };
        Ok((total, breakdown))
    }
}

/// Total loss over the full head set of `cfg`.
pub fn total_loss(
    cfg: &ModelConfig,
    outputs: &ForwardOutputs,
    targets: &Targets,
    beta: f64,
) -> Result<(Tensor, LossBreakdown)> {
    Objective::for_config(cfg, beta).evaluate(outputs, targets)
}
