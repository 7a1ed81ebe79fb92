use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dilation rates of the attention-guided long-range branch.
pub const AGLRFE_DILATIONS: [usize; 5] = [6, 10, 14, 18, 22];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Medium,
    Small,
    /// Non-preset widths (tests, toy runs); no parameter target.
    Custom,
}

impl Variant {
    /// Published trainable-parameter count, in millions.
    pub fn target_params_millions(self) -> Option<f64> {
        match self {
            Variant::Full => Some(26.58),
            Variant::Medium => Some(6.66),
            Variant::Small => Some(1.67),
            Variant::Custom => None,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "l" => Ok(Variant::Full),
            "medium" | "m" => Ok(Variant::Medium),
            "small" | "s" => Ok(Variant::Small),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::Medium => "medium",
            Variant::Small => "small",
            Variant::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Component-removal switches. The first four change the architecture; `FgOnly`
/// only affects the objective (background weight set to zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoAglrfe,
    NoAlpm,
    NoCfm,
    NoMrffam,
    FgOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoAglrfe,
        Ablation::NoAlpm,
        Ablation::NoCfm,
        Ablation::NoMrffam,
        Ablation::FgOnly,
    ];

    pub fn is_architectural(self) -> bool {
        !matches!(self, Ablation::FgOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoAglrfe => "no_aglrfe",
            Ablation::NoAlpm => "no_alpm",
            Ablation::NoCfm => "no_cfm",
            Ablation::NoMrffam => "no_mrffam",
            Ablation::FgOnly => "fg_only",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters fixing the network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the full-resolution stem that feeds the first encoder stage
    /// and the last decoder skip.
    pub stem_channels: usize,
    /// Output widths: encoder stages first, then decoder stages.
    pub stage_channels: Vec<usize>,
    pub encoder_stages: usize,
    pub decoder_stages: usize,
    pub aglrfe_dilations: Vec<usize>,
    pub decoder_mrffam_dilations: Vec<usize>,
    /// Average-pool stride in front of each encoder stage's attention.
    pub attn_pool_stride: Vec<usize>,
    /// Key/query width; `None` uses the width of the attention site.
    pub attn_dk: Option<usize>,
    pub groupnorm_groups: usize,
    pub cfm_depth: usize,
    pub decoder_refine_depth: usize,
    pub input_size: (usize, usize),
    #[serde(default)]
    pub ablations: BTreeSet<Ablation>,
}

impl ModelConfig {
    fn preset(variant: Variant, stem: usize, widths: [usize; 4]) -> Self {
        Self {
            variant,
            stem_channels: stem,
            stage_channels: widths.to_vec(),
            encoder_stages: 2,
            decoder_stages: 2,
            aglrfe_dilations: AGLRFE_DILATIONS.to_vec(),
            decoder_mrffam_dilations: vec![2, 4, 6, 8],
            attn_pool_stride: vec![4, 2],
            attn_dk: None,
            groupnorm_groups: 4,
            cfm_depth: 3,
            decoder_refine_depth: 2,
            input_size: (384, 384),
            ablations: BTreeSet::new(),
        }
    }

    pub fn full() -> Self {
        Self::preset(Variant::Full, 32, [64, 256, 208, 64])
    }

    pub fn medium() -> Self {
        Self::preset(Variant::Medium, 16, [32, 128, 96, 32])
    }

    pub fn small() -> Self {
        Self::preset(Variant::Small, 16, [16, 64, 48, 16])
    }

    pub fn for_variant(variant: Variant) -> Result<Self> {
        match variant {
            Variant::Full => Ok(Self::full()),
            Variant::Medium => Ok(Self::medium()),
            Variant::Small => Ok(Self::small()),
            Variant::Custom => Err(Error::Config("custom variant has no preset".into())),
        }
    }

    /// A network of about 35K parameters for gradient checks on tiny inputs.
    pub fn toy() -> Self {
        let mut cfg = Self::preset(Variant::Custom, 4, [4, 8, 8, 4]);
        cfg.decoder_mrffam_dilations = vec![1, 2];
        cfg.groupnorm_groups = 2;
        cfg.input_size = (8, 8);
        cfg
    }

    pub fn with_ablations(mut self, ablations: impl IntoIterator<Item = Ablation>) -> Self {
        self.ablations
            .extend(ablations.into_iter().filter(|a| a.is_architectural()));
        self
    }

    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    pub fn encoder_channels(&self, stage: usize) -> usize {
        self.stage_channels[stage]
    }

    pub fn decoder_channels(&self, stage: usize) -> usize {
        self.stage_channels[self.encoder_stages + stage]
    }

    /// Width of the tensor entering decoder stage `stage` (0-based).
    pub fn decoder_input_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.encoder_channels(self.encoder_stages - 1)
        } else {
            self.decoder_channels(stage - 1)
        }
    }

    /// Width of the skip connection consumed by decoder stage `stage`.
    pub fn decoder_skip_channels(&self, stage: usize) -> usize {
        let src = self.encoder_stages - 1 - stage;
        if src == 0 {
            self.stem_channels
        } else {
            self.encoder_channels(src - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.encoder_stages == 0 || self.encoder_stages != self.decoder_stages {
            return bad(format!(
                "encoder ({}) and decoder ({}) stage counts must match and be positive",
                self.encoder_stages, self.decoder_stages
            ));
        }
        if self.stage_channels.len() != self.encoder_stages + self.decoder_stages {
            return bad(format!(
                "stage_channels has {} entries, expected {}",
                self.stage_channels.len(),
                self.encoder_stages + self.decoder_stages
            ));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.aglrfe_dilations.is_empty() {
            return bad("aglrfe_dilations is empty".into());
        }
        if self.aglrfe_dilations[0] == 0
            || self.aglrfe_dilations.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "aglrfe_dilations must be positive and strictly increasing: {:?}",
                self.aglrfe_dilations
            ));
        }
        if self.decoder_mrffam_dilations.is_empty() || self.decoder_mrffam_dilations.contains(&0)
        {
            return bad("decoder_mrffam_dilations must be non-empty and positive".into());
        }
        if self.attn_pool_stride.len() != self.encoder_stages {
            return bad(format!(
                "attn_pool_stride needs one entry per encoder stage, got {:?}",
                self.attn_pool_stride
            ));
        }
        if let Some(s) = self.attn_pool_stride.iter().find(|&&s| s != 2 && s != 4) {
            return bad(format!("attention pool stride must be 2 or 4, got {s}"));
        }
        if self.attn_dk == Some(0) {
            return bad("attn_dk must be positive".into());
        }
        let g = self.groupnorm_groups;
        if g == 0 {
            return bad("groupnorm_groups must be positive".into());
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c % g != 0) {
            return bad(format!("stage width {c} not divisible by {g} groups"));
        }
        let chunks = self.decoder_mrffam_dilations.len();
        for stage in 0..self.decoder_stages {
            let c = self.decoder_input_channels(stage);
            if c % chunks != 0 || (c / chunks) % g != 0 {
                return bad(format!(
                    "decoder stage {} input width {c} must split into {chunks} chunks divisible by {g} groups",
                    stage + 1
                ));
            }
        }
        if self.cfm_depth == 0 || self.decoder_refine_depth == 0 {
            return bad("cfm_depth and decoder_refine_depth must be positive".into());
        }
        self.check_input(self.input_size.0, self.input_size.1)
    }

    /// Spatial sizes must halve cleanly through every stage, pool evenly for
    /// attention, and leave ALPM a map divisible by four.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        for stage in 0..self.encoder_stages {
            let (sh, sw) = (h >> stage, w >> stage);
            let scale = 1usize << stage;
            if h % scale != 0 || w % scale != 0 || sh % 4 != 0 || sw % 4 != 0 {
                return Err(Error::Precondition(format!(
                    "input {h}x{w}: encoder stage {} sees {sh}x{sw}, which must be divisible by 4",
                    stage + 1
                )));
            }
            let s = self.attn_pool_stride[stage];
            if sh % s != 0 || sw % s != 0 {
                return Err(Error::Precondition(format!(
                    "input {h}x{w}: stage {} map {sh}x{sw} not divisible by attention pool stride {s}",
                    stage + 1
                )));
            }
        }
        Ok(())
    }

    /// Names of top-level fields whose values differ.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
                let mut keys: BTreeSet<&String> = a.keys().collect();
                keys.extend(b.keys());
                keys.into_iter()
                    .filter(|k| a.get(*k) != b.get(*k))
                    .map(|k| k.to_string())
                    .collect()
            }
            _ => vec!["<root>".into()],
        }
    }
}
