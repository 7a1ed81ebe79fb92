use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::aglrfe::Aglrfe;
use super::alpm::Alpm;
use super::blocks::{ConvStack, Head};
use super::config::{Ablation, ModelConfig};
use super::decoder::DecoderStage;
use super::fusion::Cfm;
use crate::error::{Error, Result};
use crate::nn::{max_pool2d, resize_bilinear, ParamStore, Scope};

/// Supervised location in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Aglrfe,
    Alpm,
    Cfm,
    Mrffam,
    Cfmd,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Aglrfe, Site::Alpm, Site::Cfm, Site::Mrffam, Site::Cfmd];

    fn as_str(self) -> &'static str {
        match self {
            Site::Aglrfe => "aglrfe",
            Site::Alpm => "alpm",
            Site::Cfm => "cfm",
            Site::Mrffam => "mrffam",
            Site::Cfmd => "cfmd",
        }
    }

    pub fn has_contour(self) -> bool {
        matches!(self, Site::Mrffam | Site::Cfmd)
    }

    /// The ablation flag that removes this site, if any.
    pub fn ablation(self) -> Option<Ablation> {
        match self {
            Site::Aglrfe => Some(Ablation::NoAglrfe),
            Site::Alpm => Some(Ablation::NoAlpm),
            Site::Cfm => Some(Ablation::NoCfm),
            Site::Mrffam => Some(Ablation::NoMrffam),
            Site::Cfmd => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Saliency,
    Contour,
}

/// Identifies one supervised logit map. `stage` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadId {
    pub site: Site,
    pub stage: usize,
    pub kind: HeadKind,
}

impl HeadId {
    pub fn saliency(site: Site, stage: usize) -> Self {
        Self { site, stage, kind: HeadKind::Saliency }
    }

    pub fn contour(site: Site, stage: usize) -> Self {
        Self { site, stage, kind: HeadKind::Contour }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            HeadKind::Saliency => "sal",
            HeadKind::Contour => "con",
        };
        write!(f, "{}{}_{}", self.site.as_str(), self.stage, kind)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed head id `{s}`"));
        let (left, kind) = s.rsplit_once('_').ok_or_else(bad)?;
        let kind = match kind {
            "sal" => HeadKind::Saliency,
            "con" => HeadKind::Contour,
            _ => return Err(bad()),
        };
        let split = left.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?;
        let site = Site::ALL
            .into_iter()
            .find(|site| site.as_str() == &left[..split])
            .ok_or_else(bad)?;
        let stage = left[split..].parse().map_err(|_| bad())?;
        Ok(Self { site, stage, kind })
    }
}

impl Serialize for HeadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Heads a configuration emits: saliency at every site of every stage, contour
/// at the decoder sites, minus sites removed by ablation.
pub fn expected_heads(cfg: &ModelConfig) -> BTreeSet<HeadId> {
    let mut out = BTreeSet::new();
    for site in Site::ALL {
        if site.ablation().is_some_and(|a| cfg.has(a)) {
            continue;
        }
        let stages = match site {
            Site::Aglrfe | Site::Alpm | Site::Cfm => cfg.encoder_stages,
            Site::Mrffam | Site::Cfmd => cfg.decoder_stages,
        };
        for stage in 1..=stages {
            out.insert(HeadId::saliency(site, stage));
            if site.has_contour() {
                out.insert(HeadId::contour(site, stage));
            }
        }
    }
    out
}

/// Pre-sigmoid logits of every supervised head.
#[derive(Clone)]
pub struct ForwardOutputs {
    pub heads: BTreeMap<HeadId, Tensor>,
    pub input_size: (usize, usize),
    pub final_head: HeadId,
}

impl ForwardOutputs {
    pub fn get(&self, id: HeadId) -> Result<&Tensor> {
        self.heads.get(&id).ok_or(Error::MissingHead(id))
    }

    pub fn final_logits(&self) -> Result<&Tensor> {
        self.get(self.final_head)
    }

    /// Head logits bilinearly resized to the input resolution.
    pub fn upsampled(&self, id: HeadId) -> Result<Tensor> {
        let (h, w) = self.input_size;
        resize_bilinear(self.get(id)?, h, w)
    }

    /// Final saliency probabilities at input resolution.
    pub fn prediction(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.upsampled(self.final_head)?)?)
    }
}

#[derive(Clone)]
enum Global {
    Attn(Aglrfe),
    Plain(ConvStack),
}

#[derive(Clone)]
enum Local {
    Attn(Alpm),
    Plain(ConvStack),
}

#[derive(Clone)]
enum Fuse {
    Cfm(Cfm),
    Plain(ConvStack),
}

#[derive(Clone)]
struct EncoderStage {
    global: Global,
    local: Local,
    fuse: Fuse,
}

impl EncoderStage {
    fn new(scope: &Scope, cfg: &ModelConfig, stage: usize, cin: usize) -> Result<Self> {
        let c = cfg.encoder_channels(stage);
        let dk = cfg.attn_dk.unwrap_or(c);
        let g = cfg.groupnorm_groups;
        let global = if cfg.has(Ablation::NoAglrfe) {
            Global::Plain(ConvStack::batch(&scope.sub("global_plain"), cin, c, 1)?)
        } else {
            Global::Attn(Aglrfe::new(
                &scope.sub("aglrfe"),
                cin,
                c,
                &cfg.aglrfe_dilations,
                cfg.attn_pool_stride[stage],
                dk,
                g,
            )?)
        };
        let local = if cfg.has(Ablation::NoAlpm) {
            Local::Plain(ConvStack::batch(&scope.sub("local_plain"), cin, c, 1)?)
        } else {
            Local::Attn(Alpm::new(&scope.sub("alpm"), cin, c, dk)?)
        };
        let fuse = if cfg.has(Ablation::NoCfm) {
            Fuse::Plain(ConvStack::batch(&scope.sub("fuse_plain"), 2 * c, c, 1)?)
        } else {
            Fuse::Cfm(Cfm::new(&scope.sub("cfm"), c, c, c, cfg.cfm_depth, g)?)
        };
        Ok(Self { global, local, fuse })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor, Tensor)> {
        let global = match &self.global {
            Global::Attn(m) => m.forward(x, train)?,
            Global::Plain(b) => b.forward(&max_pool2d(&x, 2)?, train)?,
        };
        let local = match &self.local {
            Local::Attn(m) => m.forward(x, train)?,
            Local::Plain(b) => b.forward(&max_pool2d(&x, 2)?, train)?,
        };
        let fused = match &self.fuse {
            Fuse::Cfm(m) => m.forward(&global, &local)?,
            Fuse::Plain(b) => b.forward(&Tensor::cat(&[&global, &local], 1)?, train)?,
        };
        Ok((global, local, fused))
    }
}

/// The full saliency network: a stem, attention-augmented encoder stages and
/// aggregation decoder stages, with a 1×1 head at every supervised site.
pub struct SodaNet {
    cfg: ModelConfig,
    store: ParamStore,
    stem: ConvStack,
    encoders: Vec<EncoderStage>,
    decoders: Vec<DecoderStage>,
    heads: BTreeMap<HeadId, Head>,
}

impl SodaNet {
    /// Builds and initializes a network: conv weights ~ N(0, 2 / fan_in),
    /// biases zero, normalization at identity.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32, &Device::Cpu)
    }

    pub fn with_dtype(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let stem = ConvStack::batch(&root.sub("stem"), 3, cfg.stem_channels, 1)?;

        let mut encoders = Vec::with_capacity(cfg.encoder_stages);
        let mut cin = cfg.stem_channels;
        for stage in 0..cfg.encoder_stages {
            encoders.push(EncoderStage::new(&root.sub(format!("enc{}", stage + 1)), &cfg, stage, cin)?);
            cin = cfg.encoder_channels(stage);
        }
        let mut decoders = Vec::with_capacity(cfg.decoder_stages);
        for stage in 0..cfg.decoder_stages {
            decoders.push(DecoderStage::new(
                &root.sub(format!("dec{}", stage + 1)),
                cfg.decoder_input_channels(stage),
                cfg.decoder_skip_channels(stage),
                cfg.decoder_channels(stage),
                &cfg.decoder_mrffam_dilations,
                cfg.groupnorm_groups,
                cfg.decoder_refine_depth,
                cfg.has(Ablation::NoMrffam),
            )?);
        }

        let mut heads = BTreeMap::new();
        let hs = root.sub("heads");
        for id in expected_heads(&cfg) {
            let width = match id.site {
                Site::Aglrfe | Site::Alpm | Site::Cfm => cfg.encoder_channels(id.stage - 1),
                Site::Mrffam => cfg.decoder_input_channels(id.stage - 1),
                Site::Cfmd => cfg.decoder_channels(id.stage - 1),
            };
            heads.insert(id, Head::new(&hs.sub(id), width)?);
        }
        Ok(Self { cfg, store, stem, encoders, decoders, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn final_head(&self) -> HeadId {
        HeadId::saliency(Site::Cfmd, self.cfg.decoder_stages)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4().map_err(|_| {
            Error::Precondition(format!("expected a (B, 3, H, W) image batch, got {:?}", x.dims()))
        })?;
        if c != 3 {
            return Err(Error::Precondition(format!("expected 3 input channels, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        let v: Vec<f64> = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite { site: "input".into() });
        }
        Ok(())
    }

    fn emit(&self, out: &mut BTreeMap<HeadId, Tensor>, id: HeadId, feat: &Tensor) -> Result<()> {
        if let Some(head) = self.heads.get(&id) {
            out.insert(id, head.forward(feat)?);
        }
        Ok(())
    }

    /// Runs the network. `train` selects batch statistics (and updates the
    /// running estimates) in batch-normalized units.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<ForwardOutputs> {
        self.check_input(x)?;
        let x = x.to_dtype(self.store.dtype())?;
        let (_, _, h, w) = x.dims4()?;
        let mut heads = BTreeMap::new();

        // Inference keeps no autograd history between sites.
        let cut = |t: Tensor| if train { t } else { t.detach() };
        let stem = cut(self.stem.forward(&x, train)?);
        let mut skips = vec![stem.clone()];
        let mut cur = stem;
        for (i, enc) in self.encoders.iter().enumerate() {
            let stage = i + 1;
            let (global, local, fused) = enc.forward(&cur, train)?;
            let (global, local, fused) = (cut(global), cut(local), cut(fused));
            self.emit(&mut heads, HeadId::saliency(Site::Aglrfe, stage), &global)?;
            self.emit(&mut heads, HeadId::saliency(Site::Alpm, stage), &local)?;
            self.emit(&mut heads, HeadId::saliency(Site::Cfm, stage), &fused)?;
            skips.push(fused.clone());
            cur = fused;
        }
        skips.pop();
        for (i, dec) in self.decoders.iter().enumerate() {
            let stage = i + 1;
            let skip = skips.pop().expect("one skip per decoder stage");
            let parts = dec.forward_parts(&cur, &skip, train)?;
            let (aggregated, out) = (cut(parts.aggregated), cut(parts.out));
            for kind in [HeadKind::Saliency, HeadKind::Contour] {
                self.emit(&mut heads, HeadId { site: Site::Mrffam, stage, kind }, &aggregated)?;
                self.emit(&mut heads, HeadId { site: Site::Cfmd, stage, kind }, &out)?;
            }
            cur = out;
        }
        Ok(ForwardOutputs { heads, input_size: (h, w), final_head: self.final_head() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_ids_roundtrip_through_strings() {
        for id in expected_heads(&ModelConfig::small()) {
            let s = id.to_string();
            assert_eq!(s.parse::<HeadId>().unwrap(), id);
        }
        assert_eq!(HeadId::contour(Site::Cfmd, 2).to_string(), "cfmd2_con");
        assert!("cfmd_con".parse::<HeadId>().is_err());
    }

    #[test]
    fn fourteen_heads_by_default() {
        let heads = expected_heads(&ModelConfig::small());
        assert_eq!(heads.len(), 14);
        assert_eq!(heads.iter().filter(|h| h.kind == HeadKind::Contour).count(), 4);
    }

    #[test]
    fn ablated_sites_drop_heads() {
        let cfg = ModelConfig::small().with_ablations([Ablation::NoMrffam, Ablation::FgOnly]);
        let heads = expected_heads(&cfg);
        assert_eq!(heads.len(), 10);
        assert!(heads.iter().all(|h| h.site != Site::Mrffam));
    }

    #[test]
    fn toy_forward_shapes() {
        let cfg = ModelConfig::toy();
        let net = SodaNet::new(cfg.clone(), 0).unwrap();
        let x = Tensor::rand(0f32, 1., (2, 3, 16, 16), &Device::Cpu).unwrap();
        let out = net.forward(&x, false).unwrap();
        assert_eq!(out.heads.keys().copied().collect::<BTreeSet<_>>(), expected_heads(&cfg));
        assert_eq!(out.get(HeadId::saliency(Site::Aglrfe, 1)).unwrap().dims(), &[2, 1, 8, 8]);
        assert_eq!(out.get(HeadId::saliency(Site::Cfm, 2)).unwrap().dims(), &[2, 1, 4, 4]);
        assert_eq!(out.get(HeadId::contour(Site::Mrffam, 1)).unwrap().dims(), &[2, 1, 4, 4]);
        assert_eq!(out.get(HeadId::saliency(Site::Cfmd, 1)).unwrap().dims(), &[2, 1, 8, 8]);
        assert_eq!(out.final_logits().unwrap().dims(), &[2, 1, 16, 16]);
        assert_eq!(out.prediction().unwrap().dims(), &[2, 1, 16, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = SodaNet::new(ModelConfig::toy(), 0).unwrap();
        let four = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&four, false), Err(Error::Precondition(_))));
        let mut v = vec![0f32; 3 * 16 * 16];
        v[5] = f32::NAN;
        let nan = Tensor::from_vec(v, (1, 3, 16, 16), &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&nan, false), Err(Error::NonFinite { .. })));
    }
}
