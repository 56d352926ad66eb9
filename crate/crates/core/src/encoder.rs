//! Shared hierarchical encoder.
//!
//! One set of weights encodes the image, the DSM and (through a frozen
//! path) the estimated depth prior into four-level feature pyramids at
//! 1/4, 1/8, 1/16 and 1/32 of the input resolution. The backbone is a
//! plain residual CNN: a stride-4 stem followed by four stages of
//! conv–norm–GELU residual blocks, stages 2–4 opening with a stride-2
//! downsampling conv.

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ConvNormAct;
use crate::params::ParamStore;
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            blocks_per_stage: 2,
        }
    }
}

impl EncoderConfig {
    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.stem_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

/// Four feature levels, finest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> Var {
        self.levels[i]
    }

    pub fn shapes(&self, g: &Graph) -> Vec<Vec<usize>> {
        self.levels.iter().map(|v| g.shape(*v).to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<ConvNormAct>,
    blocks: Vec<ConvNormAct>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: ConvNormAct,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut Prng) -> Result<Self> {
        if config.stem_channels == 0 || config.in_channels == 0 {
            return Err(Error::config("encoder channels must be positive"));
        }
        let widths = config.stage_channels();
        let mut stem = ConvNormAct::new(
            store,
            &format!("{name}.stem"),
            config.in_channels,
            widths[0],
            5,
            4,
            Activation::Gelu,
            rng,
        )?;
        stem.conv.pad = 2;
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in widths.iter().enumerate() {
            let prefix = format!("{name}.stage{}", i + 1);
            let down = if i == 0 {
                None
            } else {
                Some(ConvNormAct::new(store, &format!("{prefix}.down"), widths[i - 1], c, 3, 2, Activation::Gelu, rng)?)
            };
            let blocks = (0..config.blocks_per_stage)
                .map(|b| ConvNormAct::new(store, &format!("{prefix}.block{b}"), c, c, 3, 1, Activation::Gelu, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        Ok(Self { config, stem, stages })
    }

    /// Encodes `x: [C_in, H, W]` with `H`, `W` divisible by 32.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::dim(format!("encoder expects {} input channels, got {c}", self.config.in_channels)));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("encoder input {h}x{w} is not divisible by 32")));
        }
        let mut y = self.stem.forward(g, ps, x)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                y = down.forward(g, ps, y)?;
            }
            for block in &stage.blocks {
                let r = block.forward(g, ps, y)?;
                y = g.add(y, r)?;
            }
            levels.push(y);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Same forward math as [`Encoder::encode`], but no gradient reaches the
    /// encoder weights through this path.
    pub fn encode_frozen(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<FeaturePyramid> {
        g.frozen(|g| self.encode(g, ps, x))
    }
}

/// Per-tile min–max normalization of a single-channel raster to `[0, 1]`.
///
/// Accepts `[H, W]` or `[1, H, W]` and returns `[1, H, W]`. A constant
/// raster maps to all zeros; non-finite cells map to 0.
pub fn normalize_raster_to_gray(r: &Tensor) -> Result<Tensor> {
    let (h, w) = match r.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::dim(format!("expected a single-channel raster, got {s:?}"))),
    };
    let finite = r.data().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(Error::data("raster has no finite values"));
    }
    let range = hi - lo;
    let data = r
        .data()
        .iter()
        .map(|&v| {
            if !v.is_finite() || range == 0.0 {
                0.0
            } else {
                (v - lo) / range
            }
        })
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Replicates a `[1, H, W]` map to `channels` identical channels.
pub fn replicate_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if c != 1 {
        return Err(Error::dim(format!("replicate_channels expects 1 channel, got {c}")));
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[channels, h, w], data)
}
