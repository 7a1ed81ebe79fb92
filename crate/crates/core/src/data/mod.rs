//! Dataset preparation: annotation binarization, contour derivation, flips,
//! manifests and batch loading.

pub mod build;
pub mod coco;
pub mod loader;
pub mod manifest;
pub mod mask;
pub mod sample;
pub mod synthetic;

pub use build::{build_coco, build_duts, BuildReport};
pub use loader::{epoch_order, load_entry, stack, Batch, Loader};
pub use manifest::{DatasetManifest, ManifestEntry, Phase, SourceItem, EXPANSION};
pub use mask::{binarize, derive_contour};
pub use sample::{augment, prepare, Augmentation, SaliencySample};
