//! Named parameter store with seeded initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Whether an entry is optimized or carried along (e.g. batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Trainable,
    Buffer,
}

struct Entry {
    name: String,
    role: Role,
    var: Var,
}

struct Inner {
    rng: ChaCha8Rng,
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

/// Shared, ordered registry of every tensor a model owns.
///
/// Registration order is deterministic (module construction order), so a
/// given seed always yields bit-identical weights.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(seed),
                entries: Vec::new(),
                index: BTreeMap::new(),
            })),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, path: String::new() }
    }

    fn register(&self, name: String, role: Role, tensor: Tensor) -> Result<Var> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&tensor)?;
        let at = inner.entries.len();
        inner.index.insert(name.clone(), at);
        inner.entries.push(Entry { name, role, var: var.clone() });
        Ok(var)
    }

    fn sample_normal(&self, len: usize, std: f64) -> Vec<f64> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        (0..len).map(|_| normal.sample(&mut inner.rng)).collect()
    }

    /// Trainable variables in registration order.
    pub fn trainable(&self) -> Vec<Var> {
        self.filtered(Some(Role::Trainable)).into_iter().map(|(_, v)| v).collect()
    }

    pub fn named(&self) -> Vec<(String, Var)> {
        self.filtered(None)
    }

    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        self.filtered(Some(Role::Trainable))
    }

    fn filtered(&self, role: Option<Role>) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .entries
            .iter()
            .filter(|e| role.is_none_or(|r| r == e.role))
            .map(|e| (e.name.clone(), e.var.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.index.get(name).map(|&i| inner.entries[i].var.clone())
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.index.get(name).map(|&i| inner.entries[i].role)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrite an entry in place; shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "`{name}` is {:?}, value is {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// A hierarchical name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    path: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Scope { store: self.store, path }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    fn full(&self, name: &str) -> String {
        self.sub(name).path
    }

    /// Gaussian weights with std `sqrt(2 / fan_in)`.
    pub fn he_normal(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let len: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let data = self.store.sample_normal(len, std);
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.store.register(self.full(name), Role::Trainable, t)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64, role: Role) -> Result<Var> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        self.store.register(self.full(name), role, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = ParamStore::new(7, DType::F32, Device::Cpu);
        let b = ParamStore::new(7, DType::F32, Device::Cpu);
        let wa = a.root().he_normal("w", &[8, 4, 3, 3], 36).unwrap();
        let wb = b.root().he_normal("w", &[8, 4, 3, 3], 36).unwrap();
        let va: Vec<f32> = wa.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = wb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.root().constant("b", &[2], 0.0, Role::Trainable).unwrap();
        assert!(s.root().constant("b", &[2], 0.0, Role::Trainable).is_err());
    }

    #[test]
    fn buffers_are_not_counted() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        let r = s.root().sub("bn");
        r.constant("weight", &[4], 1.0, Role::Trainable).unwrap();
        r.constant("running_mean", &[4], 0.0, Role::Buffer).unwrap();
        assert_eq!(s.trainable_count(), 4);
        assert_eq!(s.named().len(), 2);
        assert_eq!(s.role("bn.running_mean"), Some(Role::Buffer));
    }
}
