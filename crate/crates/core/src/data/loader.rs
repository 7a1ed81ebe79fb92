//! Deterministic batching over a manifest.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, ManifestEntry};
use super::sample::{augment, open_gray, open_rgb, prepare, SaliencySample};
use crate::error::{Error, Result};

pub struct Batch {
    /// `(B, 3, H, W)`
    pub images: Tensor,
    /// `(B, 1, H, W)`
    pub gt: Tensor,
    /// `(B, 1, H, W)`
    pub contour: Tensor,
    pub ids: Vec<String>,
}

pub fn load_entry(entry: &ManifestEntry, size: (usize, usize)) -> Result<SaliencySample> {
    let img = open_rgb(&entry.image)?;
    let gt = open_gray(&entry.gt)?;
    let s = prepare(&img, &gt, size, &entry.id())?;
    Ok(augment(&s, entry.aug))
}

pub fn stack(samples: &[SaliencySample], dtype: DType, device: &Device) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Manifest("empty batch".into()))?;
    let (h, w, b) = (first.height, first.width, samples.len());
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Shape("samples in a batch must share a size".into()));
    }
    let cat = |f: &dyn Fn(&SaliencySample) -> &[f32]| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<f32>>();
    let mk = |v: Vec<f32>, c: usize| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, c, h, w), device)?.to_dtype(dtype)?) };
    Ok(Batch {
        images: mk(cat(&|s| &s.image), 3)?,
        gt: mk(cat(&|s| &s.gt), 1)?,
        contour: mk(cat(&|s| &s.contour), 1)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Entry order for one epoch: a seeded shuffle, identical across runs.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Loads batches in seeded order. Unreadable entries are logged and skipped.
pub struct Loader {
    pub manifest: DatasetManifest,
    pub size: (usize, usize),
    pub batch_size: usize,
    pub seed: u64,
    cache: Option<Vec<Option<SaliencySample>>>,
}

impl Loader {
    pub fn new(manifest: DatasetManifest, size: (usize, usize), batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Plan("batch size must be positive".into()));
        }
        if manifest.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        Ok(Self { manifest, size, batch_size, seed, cache: None })
    }

    /// Decode every entry once and keep it in memory.
    pub fn cached(mut self) -> Self {
        let samples = self.manifest.entries.iter().map(|e| self.try_load(e)).collect();
        self.cache = Some(samples);
        self
    }

    fn try_load(&self, entry: &ManifestEntry) -> Option<SaliencySample> {
        match load_entry(entry, self.size) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.image.display());
                None
            }
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.manifest.len().div_ceil(self.batch_size)
    }

    /// Samples of batch `index` within `epoch`.
    pub fn batch(&self, epoch: usize, index: usize, dtype: DType, device: &Device) -> Result<Option<Batch>> {
        let order = epoch_order(self.manifest.len(), self.seed, epoch);
        let picked = order.chunks(self.batch_size).nth(index).unwrap_or(&[]);
        let samples: Vec<SaliencySample> = picked
            .iter()
            .filter_map(|&i| match &self.cache {
                Some(c) => c[i].clone(),
                None => self.try_load(&self.manifest.entries[i]),
            })
            .collect();
        if samples.is_empty() {
            return Ok(None);
        }
        stack(&samples, dtype, device).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
