//! End-to-end network: normalize → encode ×3 → fuse → change pyramid → decode.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::change::{ChangeBlocks, ChangeExtractor};
use crate::config::KvMap;
use crate::decoder::{Decoder, DecoderConfig, PredictionTriple};
use crate::encoder::{normalize_raster_to_gray, replicate_channels, Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::DepthFusion;
use crate::params::ParamStore;
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub state_dim: usize,
    pub heads: usize,
    pub use_edp: bool,
    pub blocks: ChangeBlocks,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            state_dim: 8,
            heads: 4,
            use_edp: true,
            blocks: ChangeBlocks::default(),
        }
    }
}

impl ModelConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("stem_channels", self.encoder.stem_channels.to_string());
        put("blocks_per_stage", self.encoder.blocks_per_stage.to_string());
        put("fusion_width", self.decoder.fusion_width.to_string());
        put(
            "ppm_scales",
            self.decoder.ppm_scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        put("num_classes", self.decoder.num_classes.to_string());
        put("head_width", self.decoder.head_width.to_string());
        put("state_dim", self.state_dim.to_string());
        put("heads", self.heads.to_string());
        put("use_edp", self.use_edp.to_string());
        put("use_ccab", self.blocks.ccab.to_string());
        put("use_dssm", self.blocks.dssm.to_string());
        put("use_cca", self.blocks.cca.to_string());
        KvMap(m)
    }

    /// Overrides the fields present in `kv`; unknown model keys are ignored
    /// so one file can carry training settings too.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse("stem_channels")? {
            self.encoder.stem_channels = v;
        }
        if let Some(v) = kv.parse("blocks_per_stage")? {
            self.encoder.blocks_per_stage = v;
        }
        if let Some(v) = kv.parse("fusion_width")? {
            self.decoder.fusion_width = v;
        }
        if let Some(v) = kv.list::<usize>("ppm_scales")? {
            self.decoder.ppm_scales = v;
        }
        if let Some(v) = kv.parse("num_classes")? {
            self.decoder.num_classes = v;
        }
        if let Some(v) = kv.parse("head_width")? {
            self.decoder.head_width = v;
        }
        if let Some(v) = kv.parse("state_dim")? {
            self.state_dim = v;
        }
        if let Some(v) = kv.parse("heads")? {
            self.heads = v;
        }
        if let Some(v) = kv.parse("use_edp")? {
            self.use_edp = v;
        }
        if let Some(v) = kv.parse("use_ccab")? {
            self.blocks.ccab = v;
        }
        if let Some(v) = kv.parse("use_dssm")? {
            self.blocks.dssm = v;
        }
        if let Some(v) = kv.parse("use_cca")? {
            self.blocks.cca = v;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }
}

/// Raw per-sample inputs: pre-event DSM (meters), post-event image and
/// depth prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[1, H, W]` or `[H, W]`.
    pub dsm_t1: Tensor,
    /// `[3, H, W]` or `[1, H, W]` with values in `[0, 1]`.
    pub img_t2: Tensor,
    /// `[1, H, W]` or `[H, W]`, any monotone relative-depth scale.
    pub depth_prior: Tensor,
}

/// Encoder-ready 3-channel tensors.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub dsm: Tensor,
    pub img: Tensor,
    pub edm: Tensor,
}

fn to_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = match t.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("expected [C,H,W] raster, got {s:?}"))),
    };
    let t = t.reshape(&[c, h, w])?;
    if c == channels {
        Ok(t)
    } else if c == 1 {
        replicate_channels(&t, channels)
    } else {
        Err(Error::dim(format!("cannot map {c} channels to {channels}")))
    }
}

impl ModelInput {
    pub fn prepare(&self, channels: usize) -> Result<PreparedInput> {
        let dsm = to_channels(&normalize_raster_to_gray(&self.dsm_t1)?, channels)?;
        let img = to_channels(&self.img_t2, channels)?;
        let edm = to_channels(&normalize_raster_to_gray(&self.depth_prior)?, channels)?;
        if dsm.shape() != img.shape() || edm.shape() != img.shape() {
            return Err(Error::dim(format!(
                "modalities disagree in extent: dsm {:?}, image {:?}, prior {:?}",
                dsm.shape(),
                img.shape(),
                edm.shape()
            )));
        }
        Ok(PreparedInput { dsm, img, edm })
    }
}

/// Intermediate pyramids of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub dsm: FeaturePyramid,
    pub img: FeaturePyramid,
    pub edm: Option<FeaturePyramid>,
    pub img_fused: FeaturePyramid,
    pub change: Vec<Var>,
    pub pred: PredictionTriple,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Option<DepthFusion>,
    pub change: ChangeExtractor,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the network and registers all parameters in `store`.
    pub fn new(store: &mut ParamStore, config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        config.decoder.validate()?;
        let widths = config.encoder.stage_channels();
        let encoder = Encoder::new(store, "encoder", config.encoder.clone(), rng)?;
        let fusion = if config.use_edp {
            Some(DepthFusion::new(store, "fusion", &widths, rng)?)
        } else {
            None
        };
        let change = ChangeExtractor::new(store, "change", &widths, config.state_dim, config.heads, config.blocks, rng)?;
        let decoder = Decoder::new(store, "decoder", &widths, config.decoder.clone(), rng)?;
        Ok(Self {
            config,
            encoder,
            fusion,
            change,
            decoder,
        })
    }

    /// Fresh parameters drawn from `Prng::new(seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(seed);
        let model = Self::new(&mut store, config, &mut rng)?;
        Ok((model, store))
    }

    pub fn trace(&self, g: &mut Graph, ps: &ParamStore, dsm: Var, img: Var, edm: Var) -> Result<ForwardTrace> {
        let dsm_p = self.encoder.encode(g, ps, dsm)?;
        let img_p = self.encoder.encode(g, ps, img)?;
        let (edm_p, img_fused) = match &self.fusion {
            Some(f) => {
                let edm_p = self.encoder.encode_frozen(g, ps, edm)?;
                let fused = f.fuse_pyramid(g, ps, &img_p, &edm_p)?;
                (Some(edm_p), fused)
            }
            None => (None, img_p.clone()),
        };
        let change = self.change.change_pyramid(g, ps, &dsm_p, &img_fused)?;
        let pred = self.decoder.forward(g, ps, &change, &img_fused)?;
        Ok(ForwardTrace {
            dsm: dsm_p,
            img: img_p,
            edm: edm_p,
            img_fused,
            change,
            pred,
        })
    }

    /// Records the full forward pass for already prepared inputs.
    pub fn forward_prepared(&self, g: &mut Graph, ps: &ParamStore, x: &PreparedInput) -> Result<PredictionTriple> {
        let dsm = g.constant(x.dsm.clone());
        let img = g.constant(x.img.clone());
        let edm = g.constant(x.edm.clone());
        Ok(self.trace(g, ps, dsm, img, edm)?.pred)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, input: &ModelInput) -> Result<PredictionTriple> {
        let x = input.prepare(self.config.encoder.in_channels)?;
        self.forward_prepared(g, ps, &x)
    }
}
