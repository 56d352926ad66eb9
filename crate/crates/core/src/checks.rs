//! Registry of finite-difference gradient checks covering every primitive
//! op and every composite module. Each case builds a small random instance
//! from a seed; scalar-valued functions are formed by projecting outputs
//! onto a fixed random tensor so that every output coordinate matters.

use crate::autodiff::{Graph, Mode, Var};
use crate::change::{Ccab, ChangeBlocks, Cca, Dssm, Hcfeb, SelectiveScan};
use crate::decoder::{DecoderConfig, DenseHead, DsmDecoder, PredictionTriple, UperNet};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::Result;
use crate::fusion::GateFusionLevel;
use crate::gradcheck::{grad_check_with_params, GradCheckOptions, GradCheckReport};
use crate::loss::{loss_parts, total_loss, LossConfig, Targets};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::prng::Prng;
use crate::tensor::Tensor;

type LossFn = Box<dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>>;

/// A concrete differentiable function with its parameters and inputs.
pub struct Instance {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub f: LossFn,
}

#[derive(Clone, Copy)]
pub struct CheckCase {
    /// Module group used by `--module` filtering.
    pub module: &'static str,
    pub name: &'static str,
    pub mode: Mode,
    pub max_coords: usize,
    build: fn(u64) -> Result<Instance>,
}

impl CheckCase {
    pub fn instance(&self, seed: u64) -> Result<Instance> {
        (self.build)(seed)
    }

    /// Options this case is checked with: primitives use the plain
    /// two-point rule, composite modules [`GradCheckOptions::composite`].
    pub fn options(&self, seed: u64) -> GradCheckOptions {
        let base = if self.module == "primitives" {
            GradCheckOptions::default()
        } else {
            GradCheckOptions::composite()
        };
        GradCheckOptions {
            max_coords: self.max_coords,
            seed: seed.wrapping_mul(0x9e37_79b9).wrapping_add(7),
            mode: self.mode,
            ..base
        }
    }

    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        self.run_with(seed, &self.options(seed))
    }

    pub fn run_with(&self, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let inst = self.instance(seed)?;
        grad_check_with_params(|g, ps, xs| (inst.f)(g, ps, xs), &inst.store, &inst.inputs, opts)
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

pub const TOLERANCE: f64 = 1e-4;

fn randn(rng: &mut Prng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

/// Values bounded away from zero so kinks are never straddled by `eps`.
fn away_from_zero(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(0.1, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ R` with `R` drawn from `tag`; identical on every call.
fn project(g: &mut Graph, y: Var, tag: u64) -> Result<Var> {
    let mut rng = Prng::stream(0x5eed, tag);
    let r = randn(&mut rng, g.shape(y), 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn project_all(g: &mut Graph, ys: &[Var], tag: u64) -> Result<Var> {
    let mut acc = project(g, ys[0], tag)?;
    for (k, y) in ys.iter().enumerate().skip(1) {
        let p = project(g, *y, tag + k as u64)?;
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

fn unary(seed: u64, shape: &[usize], kinked: bool, op: fn(&mut Graph, Var) -> Result<Var>) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let x = if kinked {
        away_from_zero(&mut rng, shape)
    } else {
        randn(&mut rng, shape, 1.0)
    };
    Ok(Instance {
        store: ParamStore::new(),
        inputs: vec![x],
        f: Box::new(move |g, _, xs| {
            let y = op(g, xs[0])?;
            project(g, y, seed)
        }),
    })
}

fn inputs_only(inputs: Vec<Tensor>, seed: u64, f: fn(&mut Graph, &[Var]) -> Result<Var>) -> Instance {
    Instance {
        store: ParamStore::new(),
        inputs,
        f: Box::new(move |g, _, xs| {
            let y = f(g, xs)?;
            project(g, y, seed)
        }),
    }
}

fn conv_case(seed: u64, stride: usize, replicate: bool) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let x = randn(&mut rng, &[3, 7, 6], 1.0);
    let w = randn(&mut rng, &[4, 3, 3, 3], 0.5);
    let b = randn(&mut rng, &[4], 0.5);
    let mode = if replicate {
        crate::kernels::PadMode::Replicate
    } else {
        crate::kernels::PadMode::Zeros
    };
    Ok(Instance {
        store: ParamStore::new(),
        inputs: vec![x, w, b],
        f: Box::new(move |g, _, xs| {
            let y = g.conv2d_padded(xs[0], xs[1], Some(xs[2]), stride, 1, mode)?;
            project(g, y, seed)
        }),
    })
}

fn prim_conv2d(seed: u64) -> Result<Instance> {
    conv_case(seed, 1, false)
}

fn prim_conv2d_stride2(seed: u64) -> Result<Instance> {
    conv_case(seed, 2, false)
}

fn prim_conv2d_replicate(seed: u64) -> Result<Instance> {
    conv_case(seed, 1, true)
}

fn prim_causal_dwconv1d(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[9, 4], 1.0), randn(&mut rng, &[4, 4], 0.5), randn(&mut rng, &[4], 0.5)];
    Ok(inputs_only(v, seed, |g, xs| g.causal_dwconv1d(xs[0], xs[1], xs[2])))
}

fn prim_linear(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[6, 5], 1.0), randn(&mut rng, &[5, 3], 0.5), randn(&mut rng, &[3], 0.5)];
    Ok(inputs_only(v, seed, |g, xs| g.linear(xs[0], xs[1], Some(xs[2]))))
}

fn prim_matmul(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[4, 6], 1.0), randn(&mut rng, &[6, 5], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| g.matmul(xs[0], xs[1])))
}

fn prim_layout(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[3, 4, 5], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| {
        let s = g.to_seq(xs[0])?;
        let t = g.transpose(s)?;
        let r = g.reshape(t, &[3, 20])?;
        let r = g.reshape(r, &[20, 3])?;
        let sq = g.mul(r, r)?;
        g.from_seq(sq, 4, 5)
    }))
}

fn prim_relu(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], true, |g, x| g.relu(x))
}

fn prim_gelu(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], false, |g, x| g.gelu(x))
}

fn prim_silu(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], false, |g, x| g.silu(x))
}

fn prim_sigmoid(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], false, |g, x| g.sigmoid(x))
}

fn prim_softplus(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], false, |g, x| g.softplus(x))
}

fn prim_exp(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], false, |g, x| g.exp(x))
}

fn prim_scale(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 5], false, |g, x| g.scale(x, -1.7))
}

fn prim_arith(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[3, 4], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| {
        let s = g.add(xs[0], xs[1])?;
        let d = g.sub(s, xs[2])?;
        g.mul(d, xs[0])
    }))
}

fn prim_mul_spatial(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[3, 4, 5], 1.0), randn(&mut rng, &[1, 4, 5], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| g.mul_spatial(xs[0], xs[1])))
}

fn prim_mul_channel(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[3, 4, 5], 1.0), randn(&mut rng, &[3], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| g.mul_channel(xs[0], xs[1])))
}

fn batch_norm_instance(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let stats = store.add_stats("bn.running", 3)?;
    if let Some(rs) = store.stats_by_name_mut("bn.running") {
        rs.mean = (0..3).map(|_| rng.normal()).collect();
        rs.var = (0..3).map(|_| rng.uniform(0.5, 2.0)).collect();
    }
    let inputs = vec![randn(&mut rng, &[3, 4, 5], 1.5), randn(&mut rng, &[3], 1.0), randn(&mut rng, &[3], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = g.batch_norm(xs[0], xs[1], xs[2], ps, stats)?;
            project(g, y, seed)
        }),
    })
}

fn prim_layer_norm(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[5, 6], 1.5), randn(&mut rng, &[6], 1.0), randn(&mut rng, &[6], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| g.layer_norm(xs[0], xs[1], xs[2])))
}

fn prim_pools(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[2, 5, 7], 1.0)];
    Ok(Instance {
        store: ParamStore::new(),
        inputs: v,
        f: Box::new(move |g, _, xs| {
            let gap = g.global_avg_pool(xs[0])?;
            let down = g.adaptive_avg_pool(xs[0], 3, 2)?;
            let up = g.adaptive_avg_pool(xs[0], 6, 9)?;
            project_all(g, &[gap, down, up], seed)
        }),
    })
}

fn prim_upsample(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[2, 3, 4], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| g.upsample_bilinear(xs[0], 12, 9)))
}

fn prim_concat_slice(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[2, 3, 4], 1.0), randn(&mut rng, &[2, 2, 4], 1.0)];
    Ok(inputs_only(v, seed, |g, xs| {
        let c = g.concat(&[xs[0], xs[1]], 1)?;
        let s = g.slice(c, 1, 1, 3)?;
        let c0 = g.concat(&[s, s], 0)?;
        g.mul(c0, c0)
    }))
}

fn prim_softmax(seed: u64) -> Result<Instance> {
    unary(seed, &[4, 6], false, |g, x| g.softmax(x))
}

fn prim_reductions(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let v = vec![randn(&mut rng, &[3, 4], 1.0)];
    Ok(Instance {
        store: ParamStore::new(),
        inputs: v,
        f: Box::new(|g, _, xs| {
            let sq = g.mul(xs[0], xs[0])?;
            let s = g.sum(sq)?;
            let m = g.mean(xs[0])?;
            let mm = g.mul(m, m)?;
            g.add(s, mm)
        }),
    })
}

fn prim_scan(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let (l, d, n) = (7, 3, 4);
    let x = randn(&mut rng, &[l, d], 1.0);
    let delta = Tensor::from_fn(&[l, d], |_| rng.uniform(0.05, 0.8));
    let a = Tensor::from_fn(&[d, n], |_| -rng.uniform(0.2, 2.0));
    let b = randn(&mut rng, &[l, n], 1.0);
    let c = randn(&mut rng, &[l, n], 1.0);
    Ok(inputs_only(vec![x, delta, a, b, c], seed, |g, xs| g.scan(xs[0], xs[1], xs[2], xs[3], xs[4])))
}

/// Gives every norm layer a non-trivial affine so its gradient paths are exercised.
fn jitter_params(store: &mut ParamStore, rng: &mut Prng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.name.ends_with(".gamma") || p.name.ends_with(".beta") {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
}

fn mod_fuse_level(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = GateFusionLevel::new(&mut store, "fusion.level1", 4, &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = vec![randn(&mut rng, &[4, 6, 6], 1.0), randn(&mut rng, &[4, 6, 6], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.fuse_level(g, ps, xs[0], xs[1])?;
            project(g, y, seed)
        }),
    })
}

fn mod_ccab(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = Ccab::new(&mut store, "change.ccab", 8, 6, &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = vec![randn(&mut rng, &[8, 5, 5], 1.0), randn(&mut rng, &[8, 5, 5], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs[0], xs[1])?;
            project(g, y, seed)
        }),
    })
}

fn mod_selective_scan(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = SelectiveScan::new(&mut store, "change.scan", 6, 4, &mut rng)?;
    let inputs = vec![randn(&mut rng, &[10, 6], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs[0])?;
            project(g, y, seed)
        }),
    })
}

fn mod_dssm(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = Dssm::new(&mut store, "change.dssm", 4, 4, &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = vec![randn(&mut rng, &[4, 3, 4], 1.0), randn(&mut rng, &[4, 3, 4], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs[0], xs[1])?;
            project(g, y, seed)
        }),
    })
}

fn mod_cca(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = Cca::new(&mut store, "change.cca", 8, 2, &mut rng)?;
    let inputs = vec![randn(&mut rng, &[9, 8], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs[0])?;
            project(g, y, seed)
        }),
    })
}

fn mod_hcfeb(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = Hcfeb::new(&mut store, "change.hcfeb", 4, 6, 4, 2, ChangeBlocks::default(), &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = vec![randn(&mut rng, &[4, 3, 3], 1.0), randn(&mut rng, &[4, 3, 3], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs[0], xs[1])?;
            project(g, y, seed)
        }),
    })
}

const WIDTHS: [usize; 4] = [4, 6, 8, 8];

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        fusion_width: 6,
        ppm_scales: vec![1, 2, 3, 6],
        num_classes: 3,
        head_width: 4,
    }
}

fn pyramid_inputs(rng: &mut Prng, sides: [usize; 4]) -> Vec<Tensor> {
    (0..4).map(|i| randn(rng, &[WIDTHS[i], sides[i], sides[i]], 1.0)).collect()
}

fn mod_uper_fuse(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = UperNet::new(&mut store, "decoder.uper", &WIDTHS, &small_decoder(), &mut rng)?;
    jitter_params(&mut store, &mut rng);
    // the deepest level is 2×2 so its norm statistics are non-degenerate
    let inputs = pyramid_inputs(&mut rng, [16, 8, 4, 2]);
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs)?;
            project(g, y, seed)
        }),
    })
}

fn head_case(seed: u64, c_out: usize) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = DenseHead::new(&mut store, "decoder.head", 6, 4, c_out, &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = vec![randn(&mut rng, &[6, 3, 3], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let y = m.forward(g, ps, xs[0])?;
            project(g, y, seed)
        }),
    })
}

fn mod_head_2d(seed: u64) -> Result<Instance> {
    head_case(seed, 3)
}

fn mod_head_3d(seed: u64) -> Result<Instance> {
    head_case(seed, 1)
}

fn mod_dsm_decode(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let m = DsmDecoder::new(&mut store, "decoder.dsm", &WIDTHS, 6, &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = pyramid_inputs(&mut rng, [8, 4, 2, 2]);
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let p = FeaturePyramid { levels: xs.to_vec() };
            let y = m.forward(g, ps, &p)?;
            project(g, y, seed)
        }),
    })
}

fn random_labels(rng: &mut Prng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.range(0, classes - 1)).collect()
}

fn loss_wce(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let labels = random_labels(&mut rng, 20, 3);
    let weights: Vec<f64> = (0..3).map(|_| rng.uniform(0.05, 1.0)).collect();
    let inputs = vec![randn(&mut rng, &[3, 4, 5], 2.0)];
    Ok(Instance {
        store: ParamStore::new(),
        inputs,
        f: Box::new(move |g, _, xs| g.weighted_ce(xs[0], &labels, &weights)),
    })
}

fn loss_mse(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let inputs = vec![randn(&mut rng, &[1, 4, 5], 2.0), randn(&mut rng, &[1, 4, 5], 2.0)];
    Ok(Instance {
        store: ParamStore::new(),
        inputs,
        f: Box::new(|g, _, xs| g.mse(xs[0], xs[1])),
    })
}

fn loss_grad(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mask: Vec<bool> = (0..30).map(|_| rng.bernoulli(0.6)).collect();
    let inputs = vec![randn(&mut rng, &[1, 5, 6], 2.0), randn(&mut rng, &[1, 5, 6], 2.0)];
    Ok(Instance {
        store: ParamStore::new(),
        inputs,
        f: Box::new(move |g, _, xs| g.grad_loss(xs[0], xs[1], &mask)),
    })
}

fn loss_total(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let (h, w) = (4, 5);
    let labels = random_labels(&mut rng, h * w, 3);
    let delta_h = Tensor::from_fn(&[1, h, w], |i| if labels[i] == 0 { 0.0 } else { 5.0 * rng.normal() });
    let dsm_t1 = randn(&mut rng, &[1, h, w], 3.0);
    let targets = Targets::new(labels, &dsm_t1, delta_h)?;
    let cfg = LossConfig::for_classes(3);
    let inputs = vec![
        randn(&mut rng, &[3, h, w], 1.0),
        randn(&mut rng, &[1, h, w], 3.0),
        randn(&mut rng, &[1, h, w], 3.0),
    ];
    Ok(Instance {
        store: ParamStore::new(),
        inputs,
        f: Box::new(move |g, _, xs| {
            let pred = PredictionTriple {
                logits_2d: xs[0],
                height_3d: xs[1],
                dsm_t2: xs[2],
            };
            let parts = loss_parts(g, &pred, &targets, &cfg)?;
            Ok(total_loss(g, &parts, &cfg)?.0)
        }),
    })
}

fn mod_encoder(seed: u64) -> Result<Instance> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        in_channels: 3,
        stem_channels: 4,
        blocks_per_stage: 1,
    };
    let m = Encoder::new(&mut store, "encoder", cfg, &mut rng)?;
    jitter_params(&mut store, &mut rng);
    let inputs = vec![randn(&mut rng, &[3, 32, 32], 1.0)];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let p = m.encode(g, ps, xs[0])?;
            project_all(g, &p.levels, seed)
        }),
    })
}

/// Smallest configuration that still instantiates every block.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            stem_channels: 4,
            blocks_per_stage: 1,
        },
        decoder: small_decoder(),
        state_dim: 4,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn full_model(seed: u64, use_edp: bool) -> Result<Instance> {
    let cfg = ModelConfig {
        use_edp,
        ..tiny_model_config()
    };
    let (model, mut store) = Model::init(cfg, seed)?;
    let mut rng = Prng::stream(seed, 1);
    jitter_params(&mut store, &mut rng);
    if use_edp {
        // the depth branch reuses the encoder as a frozen feature extractor,
        // which finite differences of shared weights cannot isolate
        store.set_trainable_prefix("encoder", false);
    }
    let inputs = vec![
        randn(&mut rng, &[3, 32, 32], 1.0),
        randn(&mut rng, &[3, 32, 32], 1.0),
        randn(&mut rng, &[3, 32, 32], 1.0),
    ];
    Ok(Instance {
        store,
        inputs,
        f: Box::new(move |g, ps, xs| {
            let t = model.trace(g, ps, xs[0], xs[1], xs[2])?;
            project_all(g, &[t.pred.logits_2d, t.pred.height_3d, t.pred.dsm_t2], seed)
        }),
    })
}

fn mod_full_model(seed: u64) -> Result<Instance> {
    full_model(seed, true)
}

fn mod_full_model_no_edp(seed: u64) -> Result<Instance> {
    full_model(seed, false)
}

macro_rules! case {
    ($module:expr, $name:expr, $f:expr) => {
        case!($module, $name, $f, Mode::Train, 64)
    };
    ($module:expr, $name:expr, $f:expr, $mode:expr, $coords:expr) => {
        CheckCase {
            module: $module,
            name: $name,
            mode: $mode,
            max_coords: $coords,
            build: $f,
        }
    };
}

/// Every registered check, primitives first.
pub fn all_cases() -> Vec<CheckCase> {
    vec![
        case!("primitives", "conv2d", prim_conv2d),
        case!("primitives", "conv2d_stride2", prim_conv2d_stride2),
        case!("primitives", "conv2d_replicate", prim_conv2d_replicate),
        case!("primitives", "causal_dwconv1d", prim_causal_dwconv1d),
        case!("primitives", "linear", prim_linear),
        case!("primitives", "matmul", prim_matmul),
        case!("primitives", "layout", prim_layout),
        case!("primitives", "relu", prim_relu),
        case!("primitives", "gelu", prim_gelu),
        case!("primitives", "silu", prim_silu),
        case!("primitives", "sigmoid", prim_sigmoid),
        case!("primitives", "softplus", prim_softplus),
        case!("primitives", "exp", prim_exp),
        case!("primitives", "scale", prim_scale),
        case!("primitives", "add_sub_mul", prim_arith),
        case!("primitives", "mul_spatial", prim_mul_spatial),
        case!("primitives", "mul_channel", prim_mul_channel),
        case!("primitives", "batch_norm_train", batch_norm_instance),
        case!("primitives", "batch_norm_eval", batch_norm_instance, Mode::Eval, 64),
        case!("primitives", "layer_norm", prim_layer_norm),
        case!("primitives", "pooling", prim_pools),
        case!("primitives", "upsample_bilinear", prim_upsample),
        case!("primitives", "concat_slice", prim_concat_slice),
        case!("primitives", "softmax", prim_softmax),
        case!("primitives", "sum_mean", prim_reductions),
        case!("primitives", "scan", prim_scan),
        case!("encoder", "encoder", mod_encoder, Mode::Train, 8),
        case!("fuse_level", "fuse_level", mod_fuse_level),
        case!("ccab", "ccab", mod_ccab, Mode::Train, 24),
        case!("dssm", "selective_scan", mod_selective_scan),
        case!("dssm", "dssm", mod_dssm, Mode::Train, 16),
        case!("cca", "cca", mod_cca),
        case!("hcfeb", "hcfeb", mod_hcfeb, Mode::Train, 8),
        case!("uper_fuse", "uper_fuse", mod_uper_fuse, Mode::Train, 8),
        case!("heads", "head_2d", mod_head_2d, Mode::Train, 24),
        case!("heads", "head_3d", mod_head_3d, Mode::Train, 24),
        case!("heads", "dsm_decode", mod_dsm_decode, Mode::Train, 8),
        case!("losses", "weighted_ce", loss_wce),
        case!("losses", "mse", loss_mse),
        case!("losses", "grad_loss", loss_grad),
        case!("losses", "total_loss", loss_total),
        case!("model", "full_model", mod_full_model, Mode::Train, 1),
        case!("model", "full_model_no_edp", mod_full_model_no_edp, Mode::Train, 1),
    ]
}

/// Module group names accepted by [`run_checks`].
pub fn module_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = all_cases().iter().map(|c| c.module).collect();
    v.dedup();
    v
}

/// Runs every case whose module or name equals `filter` (all when `None`)
/// for each seed in `seeds`.
pub fn run_checks(filter: Option<&str>, seeds: std::ops::Range<u64>) -> Result<Vec<CheckOutcome>> {
    let cases: Vec<CheckCase> = all_cases()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.module == f || c.name == f))
        .collect();
    if cases.is_empty() {
        return Err(crate::error::Error::config(format!(
            "unknown gradcheck module {:?}; known: {}",
            filter.unwrap_or(""),
            module_names().join(", ")
        )));
    }
    let mut out = Vec::new();
    for c in &cases {
        for seed in seeds.clone() {
            out.push(CheckOutcome {
                module: c.module,
                name: c.name,
                seed,
                report: c.run(seed)?,
            });
        }
    }
    Ok(out)
}
