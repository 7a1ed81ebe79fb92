//! JSON-lines dataset manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{open_gray, open_rgb, Augmentation};
use crate::error::{Error, Result};

/// Entries per source image in a training manifest: original, hflip, vflip.
pub const EXPANSION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Eval,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            "eval" => Ok(Phase::Eval),
            _ => Err(Error::Manifest(format!("unknown phase `{s}`"))),
        }
    }
}

/// One prepared source image and its ground-truth files.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceItem {
    pub image: PathBuf,
    pub gt: PathBuf,
    pub contour: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub gt: PathBuf,
    pub contour: PathBuf,
    pub aug: Augmentation,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        let stem = self.image.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        match self.aug {
            Augmentation::None => stem,
            Augmentation::Hflip => format!("{stem}_hflip"),
            Augmentation::Vflip => format!("{stem}_vflip"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub phase: Phase,
    pub source: String,
}

impl DatasetManifest {
    /// Training phases list every source under all three flips; evaluation
    /// lists each source once.
    pub fn expand(sources: &[SourceItem], phase: Phase, source: &str) -> Self {
        let augs: &[Augmentation] = match phase {
            Phase::Eval => &[Augmentation::None],
            _ => &Augmentation::ALL,
        };
        let entries = sources
            .iter()
            .flat_map(|s| {
                augs.iter().map(move |&aug| ManifestEntry {
                    image: s.image.clone(),
                    gt: s.gt.clone(),
                    contour: s.contour.clone(),
                    aug,
                })
            })
            .collect();
        Self { entries, phase, source: source.to_string() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Write one JSON object per line; paths under the manifest's directory
    /// are stored relative to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base)?;
        }
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let mut out = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            let line = ManifestEntry { image: rel(&e.image), gt: rel(&e.gt), contour: rel(&e.contour), aug: e.aug };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, phase: Phase) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let file = File::open(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Manifest(format!("{}:{}: {err}", path.display(), n + 1)))?;
            for p in [&mut e.image, &mut e.gt, &mut e.contour] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            entries.push(e);
        }
        let source = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Ok(Self { entries, phase, source })
    }

    /// Check that every referenced file exists and decodes.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            open_rgb(&e.image)?;
            open_gray(&e.gt)?;
            open_gray(&e.contour)?;
        }
        Ok(())
    }
}
