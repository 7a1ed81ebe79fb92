//! Single-file checkpoints: every named tensor plus the config in the header.

use std::collections::HashMap;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use super::network::SodaNet;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn save(net: &SodaNet, path: &Path) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("schema_version".to_string(), SCHEMA_VERSION.to_string());
    meta.insert("config".to_string(), serde_json::to_string(net.config())?);
    meta.insert("dtype".to_string(), dtype_name(net.store().dtype()).to_string());
    let tensors: Vec<(String, candle_core::Tensor)> = net
        .store()
        .named()
        .into_iter()
        .map(|(name, var)| (name, var.as_tensor().clone()))
        .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Config stored in a checkpoint header.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let buf = std::fs::read(path)?;
    Ok(header(&buf, path)?.0)
}

fn header(buf: &[u8], path: &Path) -> Result<(ModelConfig, DType)> {
    let (_, meta) = SafeTensors::read_metadata(buf)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let info = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata", path.display())))?;
    let version: u32 = info
        .get("schema_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing schema_version", path.display())))?;
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: schema version {version}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    let cfg: ModelConfig = serde_json::from_str(
        info.get("config")
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing config", path.display())))?,
    )?;
    let dtype = match info.get("dtype").map(String::as_str) {
        Some("f64") => DType::F64,
        _ => DType::F32,
    };
    Ok((cfg, dtype))
}

/// Rebuilds a network from a checkpoint. With `expected`, refuses to load when
/// the stored config differs, naming each differing field.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<SodaNet> {
    let buf = std::fs::read(path)?;
    let (cfg, dtype) = header(&buf, path)?;
    if let Some(want) = expected {
        let fields = want.diff(&cfg);
        if !fields.is_empty() {
            return Err(Error::ConfigMismatch { fields });
        }
    }
    let net = SodaNet::with_dtype(cfg, 0, dtype, &Device::Cpu)?;
    let st = SafeTensors::deserialize(&buf)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let stored: HashMap<String, _> = st.tensors().into_iter().collect();
    for (name, _) in net.store().named() {
        let view = stored
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor `{name}`", path.display())))?;
        net.store().assign(&name, &view.load(&Device::Cpu)?)?;
    }
    if stored.len() != net.store().named().len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} stored tensors, model has {}",
            path.display(),
            stored.len(),
            net.store().named().len()
        )));
    }
    Ok(net)
}
