//! Multi-scale decoding: UPerNet fusion of the change pyramid, the 2D and
//! 3D prediction heads, and the FPN decoder for the auxiliary T2 DSM.
//!
//! Every 3×3 conv here replicates edge cells instead of zero padding, so a
//! spatially constant feature pyramid decodes to spatially constant maps.

use crate::autodiff::{Activation, Graph, Var};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNormAct};
use crate::params::ParamStore;
use crate::prng::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub fusion_width: usize,
    pub ppm_scales: Vec<usize>,
    pub num_classes: usize,
    pub head_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            fusion_width: 32,
            ppm_scales: vec![1, 2, 3, 6],
            num_classes: 3,
            head_width: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.fusion_width == 0 || self.head_width == 0 {
            return Err(Error::config("decoder widths must be positive"));
        }
        if self.ppm_scales.is_empty() || self.ppm_scales.contains(&0) {
            return Err(Error::config("PPM scales must be nonempty and positive"));
        }
        Ok(())
    }
}

/// The three dense outputs, all at the input raster's extent.
#[derive(Clone, Copy, Debug)]
pub struct PredictionTriple {
    pub logits_2d: Var,
    pub height_3d: Var,
    pub dsm_t2: Var,
}

fn check_levels(g: &Graph, levels: &[Var], expected: usize, what: &str) -> Result<()> {
    if levels.len() != expected {
        return Err(Error::dim(format!("{what}: expected {expected} levels, got {}", levels.len())));
    }
    for v in levels {
        g.value(*v).dims3()?;
    }
    Ok(())
}

fn resize_to(g: &mut Graph, x: Var, like: Var) -> Result<Var> {
    let (_, h, w) = g.value(like).dims3()?;
    g.upsample_bilinear(x, h, w)
}

/// Top-down pathway: `p_i = lateral_i + up(p_{i+1})`, coarsest first.
fn top_down(g: &mut Graph, mut lateral: Vec<Var>) -> Result<Vec<Var>> {
    for i in (0..lateral.len() - 1).rev() {
        let up = resize_to(g, lateral[i + 1], lateral[i])?;
        lateral[i] = g.add(lateral[i], up)?;
    }
    Ok(lateral)
}

fn concat_at_finest(g: &mut Graph, levels: &[Var]) -> Result<Var> {
    let mut parts = vec![levels[0]];
    for &l in &levels[1..] {
        parts.push(resize_to(g, l, levels[0])?);
    }
    g.concat(&parts, 0)
}

#[derive(Clone, Debug)]
pub struct UperNet {
    pub ppm: Vec<(usize, Conv2d)>,
    pub ppm_fuse: ConvNormAct,
    pub laterals: Vec<Conv2d>,
    pub fpn: Vec<ConvNormAct>,
    pub fuse: ConvNormAct,
}

impl UperNet {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize; 4], cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let fw = cfg.fusion_width;
        let deepest = widths[3];
        // no norm inside the pooled branches: a 1×1 map has no spatial statistics
        let ppm = cfg
            .ppm_scales
            .iter()
            .map(|&s| Ok((s, Conv2d::new(store, &format!("{name}.ppm.scale{s}"), deepest, fw, 1, 1, true, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let ppm_in = deepest + fw * cfg.ppm_scales.len();
        let ppm_fuse = ConvNormAct::new(store, &format!("{name}.ppm.fuse"), ppm_in, fw, 3, 1, Activation::Relu, rng)?.replicate();
        let laterals = widths[..3]
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("{name}.lateral{}", i + 1), c, fw, 1, 1, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let fpn = (0..3)
            .map(|i| Ok(ConvNormAct::new(store, &format!("{name}.fpn{}", i + 1), fw, fw, 3, 1, Activation::Relu, rng)?.replicate()))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvNormAct::new(store, &format!("{name}.fuse"), 4 * fw, fw, 3, 1, Activation::Relu, rng)?.replicate();
        Ok(Self {
            ppm,
            ppm_fuse,
            laterals,
            fpn,
            fuse,
        })
    }

    /// Pyramid pooling over the deepest level. Pooled sizes are capped at
    /// the level's own extent so every branch upsamples back.
    pub fn pyramid_pool(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).dims3()?;
        let mut parts = vec![x];
        for (s, conv) in &self.ppm {
            let p = g.adaptive_avg_pool(x, (*s).min(h), (*s).min(w))?;
            let p = conv.forward(g, ps, p)?;
            let p = g.relu(p)?;
            parts.push(g.upsample_bilinear(p, h, w)?);
        }
        let cat = g.concat(&parts, 0)?;
        self.ppm_fuse.forward(g, ps, cat)
    }

    /// `[fusion_width, H/4, W/4]` from the four change levels.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, change: &[Var]) -> Result<Var> {
        check_levels(g, change, 4, "uper_fuse")?;
        let mut lateral = Vec::with_capacity(4);
        for (conv, &x) in self.laterals.iter().zip(change) {
            lateral.push(conv.forward(g, ps, x)?);
        }
        lateral.push(self.pyramid_pool(g, ps, change[3])?);
        let mut levels = top_down(g, lateral)?;
        for (conv, l) in self.fpn.iter().zip(levels.iter_mut()) {
            *l = conv.forward(g, ps, *l)?;
        }
        let cat = concat_at_finest(g, &levels)?;
        self.fuse.forward(g, ps, cat)
    }
}

/// `head(Up×4(F))`: upsample first, then 3×3 conv–norm–ReLU and a 1×1 projection.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub body: ConvNormAct,
    pub out: Conv2d,
}

impl DenseHead {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, width: usize, c_out: usize, rng: &mut Prng) -> Result<Self> {
        Ok(Self {
            body: ConvNormAct::new(store, &format!("{name}.body"), c_in, width, 3, 1, Activation::Relu, rng)?.replicate(),
            out: Conv2d::new(store, &format!("{name}.out"), width, c_out, 1, 1, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f: Var) -> Result<Var> {
        let (_, h, w) = g.value(f).dims3()?;
        let up = g.upsample_bilinear(f, 4 * h, 4 * w)?;
        let y = self.body.forward(g, ps, up)?;
        self.out.forward(g, ps, y)
    }
}

/// Lightweight FPN over the fused image pyramid with a single-channel DSM head.
#[derive(Clone, Debug)]
pub struct DsmDecoder {
    pub laterals: Vec<Conv2d>,
    pub fuse: ConvNormAct,
    pub head: Conv2d,
}

impl DsmDecoder {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize; 4], fusion_width: usize, rng: &mut Prng) -> Result<Self> {
        let laterals = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("{name}.lateral{}", i + 1), c, fusion_width, 1, 1, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            laterals,
            fuse: ConvNormAct::new(store, &format!("{name}.fuse"), 4 * fusion_width, fusion_width, 3, 1, Activation::Relu, rng)?
                .replicate(),
            head: Conv2d::new(store, &format!("{name}.head"), fusion_width, 1, 1, 1, true, rng)?,
        })
    }

    /// Predicted T2 DSM `[1, H, W]` in meters.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, img_fused: &FeaturePyramid) -> Result<Var> {
        check_levels(g, &img_fused.levels, self.laterals.len(), "dsm_decode")?;
        let mut lateral = Vec::with_capacity(4);
        for (conv, &x) in self.laterals.iter().zip(&img_fused.levels) {
            lateral.push(conv.forward(g, ps, x)?);
        }
        let levels = top_down(g, lateral)?;
        let cat = concat_at_finest(g, &levels)?;
        let f = self.fuse.forward(g, ps, cat)?;
        let (_, h, w) = g.value(f).dims3()?;
        let up = g.upsample_bilinear(f, 4 * h, 4 * w)?;
        self.head.forward(g, ps, up)
    }
}

/// UPerNet trunk, the two change heads and the auxiliary DSM decoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub uper: UperNet,
    pub head_2d: DenseHead,
    pub head_3d: DenseHead,
    pub dsm: DsmDecoder,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize; 4], config: DecoderConfig, rng: &mut Prng) -> Result<Self> {
        let fw = config.fusion_width;
        Ok(Self {
            uper: UperNet::new(store, &format!("{name}.uper"), widths, &config, rng)?,
            head_2d: DenseHead::new(store, &format!("{name}.head2d"), fw, config.head_width, config.num_classes, rng)?,
            head_3d: DenseHead::new(store, &format!("{name}.head3d"), fw, config.head_width, 1, rng)?,
            dsm: DsmDecoder::new(store, &format!("{name}.dsm"), widths, fw, rng)?,
            config,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, change: &[Var], img_fused: &FeaturePyramid) -> Result<PredictionTriple> {
        let f = self.uper.forward(g, ps, change)?;
        Ok(PredictionTriple {
            logits_2d: self.head_2d.forward(g, ps, f)?,
            height_3d: self.head_3d.forward(g, ps, f)?,
            dsm_t2: self.dsm.forward(g, ps, img_fused)?,
        })
    }
}
