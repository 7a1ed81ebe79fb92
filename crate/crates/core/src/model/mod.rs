//! Network definition: configuration, building blocks, assembly and checkpoints.

pub mod aglrfe;
pub mod alpm;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod fusion;
pub mod network;

pub use config::{Ablation, ModelConfig, Variant};
pub use network::{expected_heads, ForwardOutputs, HeadId, HeadKind, Site, SodaNet};
