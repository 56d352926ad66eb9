//! Cross-temporal, cross-modal change feature extraction.
//!
//! Level 1 goes through the convolutional channel attention block
//! ([`Ccab`]); levels 2–4 go through the hierarchical change feature
//! extraction block ([`Hcfeb`]): a difference-aware state-space mixer
//! ([`Dssm`]) and a cross-channel attention layer ([`Cca`]), each followed
//! by an MLP, all on a pre-norm residual stream of width `2C`.

use crate::autodiff::{Activation, Graph, Var};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, CausalConv1d, Conv2d, ConvNormAct, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Channel-attention bottleneck ratio.
pub const CCAB_REDUCTION: usize = 4;

/// Which change-extraction blocks are active; a disabled block is replaced
/// by a plain conv/MLP of similar size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChangeBlocks {
    pub ccab: bool,
    pub dssm: bool,
    pub cca: bool,
}

impl Default for ChangeBlocks {
    fn default() -> Self {
        Self {
            ccab: true,
            dssm: true,
            cca: true,
        }
    }
}

fn check_pair(g: &Graph, f_dsm: Var, f_img: Var) -> Result<(usize, usize, usize)> {
    if g.shape(f_dsm) != g.shape(f_img) {
        return Err(Error::dim(format!(
            "change block: DSM features {:?} vs image features {:?}",
            g.shape(f_dsm),
            g.shape(f_img)
        )));
    }
    g.value(f_dsm).dims3()
}

// ----- CCAB ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Ccab {
    pub enhance: Conv2d,
    pub norm: BatchNorm,
    pub squeeze: Linear,
    pub excite: Linear,
    pub reduce: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct CcabTrace {
    /// `X + X̃ ⊙ a`, before the width reduction.
    pub residual: Var,
    /// Channel weights `a`, shape `[2C]`.
    pub weights: Var,
    pub out: Var,
}

impl Ccab {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, c_out: usize, rng: &mut Prng) -> Result<Self> {
        let width = 2 * c;
        if !width.is_multiple_of(CCAB_REDUCTION) {
            return Err(Error::config(format!("CCAB width {width} not divisible by {CCAB_REDUCTION}")));
        }
        let hidden = width / CCAB_REDUCTION;
        Ok(Self {
            enhance: Conv2d::new(store, &format!("{name}.enhance"), width, width, 3, 1, false, rng)?,
            norm: BatchNorm::new(store, &format!("{name}.bn"), width)?,
            squeeze: Linear::new(store, &format!("{name}.squeeze"), width, hidden, true, rng)?,
            excite: Linear::new(store, &format!("{name}.excite"), hidden, width, true, rng)?,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), width, c_out, 1, 1, true, rng)?,
        })
    }

    pub fn trace(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<CcabTrace> {
        check_pair(g, f_dsm, f_img)?;
        let x = g.concat(&[f_dsm, f_img], 0)?;
        let e = self.enhance.forward(g, ps, x)?;
        let e = self.norm.forward(g, ps, e)?;
        let e = g.gelu(e)?;
        let pooled = g.global_avg_pool(e)?;
        let width = g.shape(pooled)[0];
        let s = g.reshape(pooled, &[1, width])?;
        let s = self.squeeze.forward(g, ps, s)?;
        let s = g.gelu(s)?;
        let s = self.excite.forward(g, ps, s)?;
        let s = g.sigmoid(s)?;
        let weights = g.reshape(s, &[width])?;
        let scaled = g.mul_channel(e, weights)?;
        let residual = g.add(x, scaled)?;
        let out = self.reduce.forward(g, ps, residual)?;
        Ok(CcabTrace { residual, weights, out })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<Var> {
        Ok(self.trace(g, ps, f_dsm, f_img)?.out)
    }
}

/// Stand-in for a disabled CCAB: conv–norm–GELU on the concat, then reduce.
#[derive(Clone, Debug)]
pub struct PlainConvFusion {
    pub body: ConvNormAct,
    pub reduce: Conv2d,
}

impl PlainConvFusion {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, c_out: usize, rng: &mut Prng) -> Result<Self> {
        Ok(Self {
            body: ConvNormAct::new(store, &format!("{name}.body"), 2 * c, 2 * c, 3, 1, Activation::Gelu, rng)?,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), 2 * c, c_out, 1, 1, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<Var> {
        check_pair(g, f_dsm, f_img)?;
        let x = g.concat(&[f_dsm, f_img], 0)?;
        let y = self.body.forward(g, ps, x)?;
        self.reduce.forward(g, ps, y)
    }
}

// ----- selective scan -----------------------------------------------------

/// Input-dependent state-space parameters around [`Graph::scan`].
///
/// `Δ = softplus(Linear(S))`, `B = Linear(S)`, `C = Linear(S)` and
/// `A = −exp(Â)`, so `A < 0` and `Δ > 0` by construction.
#[derive(Clone, Debug)]
pub struct SelectiveScan {
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub state_dim: usize,
}

/// The discretization inputs handed to the recurrence.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

/// `softplus⁻¹(0.1)`: the initial step size at zero input.
pub fn dt_bias_init() -> f64 {
    (0.1f64.exp() - 1.0).ln()
}

impl SelectiveScan {
    pub fn new(store: &mut ParamStore, name: &str, d_inner: usize, state_dim: usize, rng: &mut Prng) -> Result<Self> {
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), d_inner, d_inner, true, rng)?;
        if let Some(b) = dt_proj.bias {
            store.get_mut(b).value = Tensor::full(&[d_inner], dt_bias_init());
        }
        let a_log = store.add(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[d_inner, state_dim], |i| ((i % state_dim) as f64 + 1.0).ln()),
        )?;
        Ok(Self {
            dt_proj,
            b_proj: Linear::new(store, &format!("{name}.b_proj"), d_inner, state_dim, false, rng)?,
            c_proj: Linear::new(store, &format!("{name}.c_proj"), d_inner, state_dim, false, rng)?,
            a_log,
            state_dim,
        })
    }

    pub fn inputs(&self, g: &mut Graph, ps: &ParamStore, s: Var) -> Result<ScanInputs> {
        let dt = self.dt_proj.forward(g, ps, s)?;
        let delta = g.softplus(dt)?;
        let a_log = g.param(ps, self.a_log);
        let a = g.exp(a_log)?;
        let a = g.scale(a, -1.0)?;
        let b = self.b_proj.forward(g, ps, s)?;
        let c = self.c_proj.forward(g, ps, s)?;
        Ok(ScanInputs { delta, a, b, c })
    }

    /// `S: [L, d_inner] -> [L, d_inner]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, s: Var) -> Result<Var> {
        let p = self.inputs(g, ps, s)?;
        g.scan(s, p.delta, p.a, p.b, p.c)
    }
}

// ----- DSSM -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Dssm {
    pub in_proj: Linear,
    pub conv: CausalConv1d,
    pub scan: SelectiveScan,
    pub diff_proj: Linear,
    pub diff_conv: CausalConv1d,
    pub out_proj: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DssmTrace {
    /// Row-major flattened `concat(F_dsm, F̂_img)`, `[L, 2C]`.
    pub x_seq: Var,
    pub s: Var,
    pub scanned: Var,
    pub diff: Var,
    pub out: Var,
}

impl Dssm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, state_dim: usize, rng: &mut Prng) -> Result<Self> {
        let width = 2 * c;
        let d_inner = 2 * width;
        Ok(Self {
            in_proj: Linear::new(store, &format!("{name}.in_proj"), width, d_inner, true, rng)?,
            conv: CausalConv1d::new(store, &format!("{name}.conv"), d_inner, 3, rng)?,
            scan: SelectiveScan::new(store, &format!("{name}.ssm"), d_inner, state_dim, rng)?,
            diff_proj: Linear::new(store, &format!("{name}.diff_proj"), c, d_inner, true, rng)?,
            diff_conv: CausalConv1d::new(store, &format!("{name}.diff_conv"), d_inner, 3, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), 2 * d_inner, width, true, rng)?,
        })
    }

    pub fn trace(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<DssmTrace> {
        check_pair(g, f_dsm, f_img)?;
        let x = g.concat(&[f_dsm, f_img], 0)?;
        let x_seq = g.to_seq(x)?;
        let s = self.in_proj.forward(g, ps, x_seq)?;
        let s = self.conv.forward(g, ps, s)?;
        let s = g.silu(s)?;
        let scanned = self.scan.forward(g, ps, s)?;

        let d = g.sub(f_img, f_dsm)?;
        let d = g.to_seq(d)?;
        let d = self.diff_proj.forward(g, ps, d)?;
        let d = self.diff_conv.forward(g, ps, d)?;
        let diff = g.silu(d)?;

        let both = g.concat(&[scanned, diff], 1)?;
        let out = self.out_proj.forward(g, ps, both)?;
        Ok(DssmTrace { x_seq, s, scanned, diff, out })
    }

    /// `[C, H, W]` pair to `[H·W, 2C]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<Var> {
        Ok(self.trace(g, ps, f_dsm, f_img)?.out)
    }
}

// ----- CCA ------------------------------------------------------------------

/// Multi-head attention over the channel axis: each head forms a `d×d`
/// attention matrix from `QᵀK`, so the result is equivariant to any
/// permutation of the tokens.
#[derive(Clone, Debug)]
pub struct Cca {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Cca {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Prng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!("CCA: {heads} heads do not divide width {width}")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng)?,
            heads,
            width,
        })
    }

    /// Attention output without the residual, plus the per-head `d×d` maps.
    pub fn attend(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let (_, c) = g.value(x).dims2()?;
        if c != self.width {
            return Err(Error::dim(format!("CCA: width {c}, expected {}", self.width)));
        }
        let d = c / self.heads;
        let qkv = self.qkv.forward(g, ps, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(qkv, 1, h * d, d)?;
            let k = g.slice(qkv, 1, c + h * d, d)?;
            let v = g.slice(qkv, 1, 2 * c + h * d, d)?;
            let qt = g.transpose(q)?;
            let logits = g.matmul(qt, k)?;
            let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
            let attn = g.softmax(logits)?;
            let attn_t = g.transpose(attn)?;
            outs.push(g.matmul(v, attn_t)?);
            maps.push(attn);
        }
        let merged = g.concat(&outs, 1)?;
        Ok((self.proj.forward(g, ps, merged)?, maps))
    }

    /// `x + Linear(attention(x))` on `x: [L, C]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (a, _) = self.attend(g, ps, x)?;
        g.add(x, a)
    }
}

// ----- HCFEB ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, hidden: usize, c_out: usize, rng: &mut Prng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c_in, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c_out, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, ps, h)
    }
}

#[derive(Clone, Debug)]
pub enum SequenceMixer {
    Dssm(Dssm),
    /// Token-wise MLP on the flattened concat (DSSM disabled).
    Plain(Mlp),
}

#[derive(Clone, Debug)]
pub enum ChannelMixer {
    Cca(Cca),
    /// Token-wise linear map (CCA disabled).
    Plain(Linear),
}

#[derive(Clone, Debug)]
pub struct Hcfeb {
    pub mixer: SequenceMixer,
    pub norm1: LayerNorm,
    pub mlp1: Mlp,
    pub norm2: LayerNorm,
    pub attention: ChannelMixer,
    pub norm3: LayerNorm,
    pub mlp2: Mlp,
    pub reduce: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct HcfebTrace {
    pub x: Var,
    /// Residual stream after the last MLP, `[L, 2C]`.
    pub z: Var,
    pub out: Var,
}

impl Hcfeb {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        c_out: usize,
        state_dim: usize,
        heads: usize,
        blocks: ChangeBlocks,
        rng: &mut Prng,
    ) -> Result<Self> {
        let width = 2 * c;
        let mixer = if blocks.dssm {
            SequenceMixer::Dssm(Dssm::new(store, &format!("{name}.dssm"), c, state_dim, rng)?)
        } else {
            SequenceMixer::Plain(Mlp::new(store, &format!("{name}.mix"), width, 2 * width, width, rng)?)
        };
        let attention = if blocks.cca {
            ChannelMixer::Cca(Cca::new(store, &format!("{name}.cca"), width, heads, rng)?)
        } else {
            ChannelMixer::Plain(Linear::new(store, &format!("{name}.chan"), width, width, true, rng)?)
        };
        Ok(Self {
            mixer,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            mlp1: Mlp::new(store, &format!("{name}.mlp1"), width, 2 * width, width, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
            attention,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width)?,
            mlp2: Mlp::new(store, &format!("{name}.mlp2"), width, 2 * width, width, rng)?,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), width, c_out, 1, 1, true, rng)?,
        })
    }

    pub fn trace(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<HcfebTrace> {
        let (_, h, w) = check_pair(g, f_dsm, f_img)?;
        let cat = g.concat(&[f_dsm, f_img], 0)?;
        let x = g.to_seq(cat)?;
        let mixed = match &self.mixer {
            SequenceMixer::Dssm(d) => d.forward(g, ps, f_dsm, f_img)?,
            SequenceMixer::Plain(m) => m.forward(g, ps, x)?,
        };
        let u = g.add(x, mixed)?;
        let n = self.norm1.forward(g, ps, u)?;
        let m = self.mlp1.forward(g, ps, n)?;
        let v = g.add(u, m)?;
        let n = self.norm2.forward(g, ps, v)?;
        // the block-level skip provides the attention residual
        let a = match &self.attention {
            ChannelMixer::Cca(c) => c.attend(g, ps, n)?.0,
            ChannelMixer::Plain(l) => l.forward(g, ps, n)?,
        };
        let wv = g.add(v, a)?;
        let n = self.norm3.forward(g, ps, wv)?;
        let m = self.mlp2.forward(g, ps, n)?;
        let z = g.add(wv, m)?;
        let map = g.from_seq(z, h, w)?;
        let out = self.reduce.forward(g, ps, map)?;
        Ok(HcfebTrace { x, z, out })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_dsm: Var, f_img: Var) -> Result<Var> {
        Ok(self.trace(g, ps, f_dsm, f_img)?.out)
    }
}

// ----- pyramid ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum FirstLevelBlock {
    Ccab(Ccab),
    Plain(PlainConvFusion),
}

#[derive(Clone, Debug)]
pub struct ChangeExtractor {
    pub first: FirstLevelBlock,
    pub deeper: Vec<Hcfeb>,
}

impl ChangeExtractor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize; 4],
        state_dim: usize,
        heads: usize,
        blocks: ChangeBlocks,
        rng: &mut Prng,
    ) -> Result<Self> {
        let first = if blocks.ccab {
            FirstLevelBlock::Ccab(Ccab::new(store, &format!("{name}.level1.ccab"), widths[0], widths[0], rng)?)
        } else {
            FirstLevelBlock::Plain(PlainConvFusion::new(store, &format!("{name}.level1.plain"), widths[0], widths[0], rng)?)
        };
        let deeper = (1..4)
            .map(|i| {
                Hcfeb::new(
                    store,
                    &format!("{name}.level{}.hcfeb", i + 1),
                    widths[i],
                    widths[i],
                    state_dim,
                    heads,
                    blocks,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { first, deeper })
    }

    /// Change features `{F1ch..F4ch}` with the input level widths.
    pub fn change_pyramid(&self, g: &mut Graph, ps: &ParamStore, dsm: &FeaturePyramid, img: &FeaturePyramid) -> Result<Vec<Var>> {
        if dsm.levels.len() != 4 || img.levels.len() != 4 {
            return Err(Error::dim("change_pyramid needs 4 levels per modality"));
        }
        let mut out = Vec::with_capacity(4);
        out.push(match &self.first {
            FirstLevelBlock::Ccab(b) => b.forward(g, ps, dsm.levels[0], img.levels[0])?,
            FirstLevelBlock::Plain(b) => b.forward(g, ps, dsm.levels[0], img.levels[0])?,
        });
        for (i, block) in self.deeper.iter().enumerate() {
            out.push(block.forward(g, ps, dsm.levels[i + 1], img.levels[i + 1])?);
        }
        Ok(out)
    }
}
