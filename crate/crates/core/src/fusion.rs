//! Gated injection of depth-prior features into image features.
//!
//! Per pyramid level:
//!
//! ```text
//! F̃img = Conv(Fimg), F̃edm = Conv(Fedm)
//! M     = sigmoid(φm(concat(F̃edm, F̃img)))            M ∈ (0,1)^{1×H×W}
//! Ffus  = F̃img + M ⊙ F̃edm
//! F̂img  = φr(Ffus) + Fimg
//! ```
//!
//! `φm` is conv3×3(2C→C/2) → norm → GELU → conv1×1(C/2→1) and `φr` is
//! conv3×3(C→C) → norm → ReLU.

use crate::autodiff::{Graph, Var};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d};
use crate::params::ParamStore;
use crate::prng::Prng;

#[derive(Clone, Debug)]
pub struct GateFusionLevel {
    pub transform_img: Conv2d,
    pub transform_edm: Conv2d,
    pub gate_conv: Conv2d,
    pub gate_norm: BatchNorm,
    pub gate_out: Conv2d,
    pub refine_conv: Conv2d,
    pub refine_norm: BatchNorm,
}

/// Intermediate values of one fused level.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub img_t: Var,
    pub edm_t: Var,
    pub gate: Var,
    pub fused: Var,
    pub out: Var,
}

impl GateFusionLevel {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Prng) -> Result<Self> {
        let mid = (c / 2).max(1);
        Ok(Self {
            transform_img: Conv2d::new(store, &format!("{name}.transform_img"), c, c, 3, 1, true, rng)?,
            transform_edm: Conv2d::new(store, &format!("{name}.transform_edm"), c, c, 3, 1, true, rng)?,
            gate_conv: Conv2d::new(store, &format!("{name}.gate.conv"), 2 * c, mid, 3, 1, false, rng)?,
            gate_norm: BatchNorm::new(store, &format!("{name}.gate.bn"), mid)?,
            gate_out: Conv2d::new(store, &format!("{name}.gate.out"), mid, 1, 1, 1, true, rng)?,
            refine_conv: Conv2d::new(store, &format!("{name}.refine.conv"), c, c, 3, 1, false, rng)?,
            refine_norm: BatchNorm::new(store, &format!("{name}.refine.bn"), c)?,
        })
    }

    pub fn transform_level(&self, g: &mut Graph, ps: &ParamStore, f_img: Var, f_edm: Var) -> Result<(Var, Var)> {
        if g.shape(f_img) != g.shape(f_edm) {
            return Err(Error::dim(format!(
                "fusion: image level {:?} vs depth level {:?}",
                g.shape(f_img),
                g.shape(f_edm)
            )));
        }
        let img_t = self.transform_img.forward(g, ps, f_img)?;
        let edm_t = self.transform_edm.forward(g, ps, f_edm)?;
        Ok((img_t, edm_t))
    }

    /// Single-channel spatial gate; depth features come first in the concat.
    pub fn gate_map(&self, g: &mut Graph, ps: &ParamStore, img_t: Var, edm_t: Var) -> Result<Var> {
        if g.shape(img_t) != g.shape(edm_t) {
            return Err(Error::dim("gate_map: transformed features differ in shape"));
        }
        let x = g.concat(&[edm_t, img_t], 0)?;
        let y = self.gate_conv.forward(g, ps, x)?;
        let y = self.gate_norm.forward(g, ps, y)?;
        let y = g.gelu(y)?;
        let y = self.gate_out.forward(g, ps, y)?;
        g.sigmoid(y)
    }

    pub fn trace(&self, g: &mut Graph, ps: &ParamStore, f_img: Var, f_edm: Var) -> Result<FusionTrace> {
        let (img_t, edm_t) = self.transform_level(g, ps, f_img, f_edm)?;
        let gate = self.gate_map(g, ps, img_t, edm_t)?;
        let injected = g.mul_spatial(edm_t, gate)?;
        let fused = g.add(img_t, injected)?;
        let r = self.refine_conv.forward(g, ps, fused)?;
        let r = self.refine_norm.forward(g, ps, r)?;
        let r = g.relu(r)?;
        let out = g.add(r, f_img)?;
        Ok(FusionTrace { img_t, edm_t, gate, fused, out })
    }

    pub fn fuse_level(&self, g: &mut Graph, ps: &ParamStore, f_img: Var, f_edm: Var) -> Result<Var> {
        Ok(self.trace(g, ps, f_img, f_edm)?.out)
    }
}

#[derive(Clone, Debug)]
pub struct DepthFusion {
    pub levels: Vec<GateFusionLevel>,
}

impl DepthFusion {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Prng) -> Result<Self> {
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| GateFusionLevel::new(store, &format!("{name}.level{}", i + 1), c, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    /// Fuses each level independently.
    pub fn fuse_pyramid(&self, g: &mut Graph, ps: &ParamStore, img: &FeaturePyramid, edm: &FeaturePyramid) -> Result<FeaturePyramid> {
        if img.levels.len() != self.levels.len() || edm.levels.len() != self.levels.len() {
            return Err(Error::dim(format!(
                "fuse_pyramid: {} levels configured, got {} image and {} depth levels",
                self.levels.len(),
                img.levels.len(),
                edm.levels.len()
            )));
        }
        let levels = self
            .levels
            .iter()
            .zip(img.levels.iter().zip(&edm.levels))
            .map(|(lvl, (&fi, &fe))| lvl.fuse_level(g, ps, fi, fe))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::params::ParamId;
    use crate::tensor::Tensor;

    fn randn(rng: &mut Prng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn set(store: &mut ParamStore, id: ParamId, v: f64) {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::full(&shape, v);
    }

    fn identity_3x3(store: &mut ParamStore, conv: &Conv2d) {
        let w = store.value(conv.weight).clone();
        let (o, i, _, _) = w.dims4().unwrap();
        store.get_mut(conv.weight).value =
            Tensor::from_fn(&[o, i, 3, 3], |k| if k % 9 == 4 && (k / 9) / i == (k / 9) % i { 1.0 } else { 0.0 });
        if let Some(b) = conv.bias {
            set(store, b, 0.0);
        }
    }

    fn fixture(seed: u64) -> (ParamStore, GateFusionLevel, Prng) {
        let mut rng = Prng::new(seed);
        let mut store = ParamStore::new();
        let lvl = GateFusionLevel::new(&mut store, "f", 4, &mut rng).unwrap();
        (store, lvl, rng)
    }

    #[test]
    fn identity_transforms_pass_features_through() {
        let (mut store, lvl, mut rng) = fixture(1);
        identity_3x3(&mut store, &lvl.transform_img);
        identity_3x3(&mut store, &lvl.transform_edm);
        let (a, b) = (randn(&mut rng, &[4, 8, 8]), randn(&mut rng, &[4, 8, 8]));
        let mut g = Graph::new(Mode::Train);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let (it, et) = lvl.transform_level(&mut g, &store, av, bv).unwrap();
        assert!(g.value(it).max_abs_diff(&a) < 1e-15);
        assert!(g.value(et).max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn image_transform_does_not_touch_depth_branch() {
        let (mut store, lvl, mut rng) = fixture(2);
        let (a, b) = (randn(&mut rng, &[4, 4, 4]), randn(&mut rng, &[4, 4, 4]));
        let run = |store: &ParamStore| {
            let mut g = Graph::new(Mode::Train);
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let (_, et) = lvl.transform_level(&mut g, store, av, bv).unwrap();
            g.value(et).clone()
        };
        let before = run(&store);
        store.get_mut(lvl.transform_img.weight).value.data_mut()[0] += 0.5;
        assert!(before.bitwise_eq(&run(&store)));
    }

    #[test]
    fn gate_examples() {
        let (mut store, lvl, mut rng) = fixture(3);
        for id in [lvl.gate_conv.weight, lvl.gate_out.weight, lvl.gate_out.bias.unwrap()] {
            set(&mut store, id, 0.0);
        }
        let mut g = Graph::new(Mode::Train);
        let a = g.constant(randn(&mut rng, &[4, 5, 5]));
        let b = g.constant(randn(&mut rng, &[4, 5, 5]));
        let m = lvl.gate_map(&mut g, &store, a, b).unwrap();
        assert_eq!(g.shape(m), &[1, 5, 5]);
        assert!(g.value(m).data().iter().all(|v| *v == 0.5));
        set(&mut store, lvl.gate_out.bias.unwrap(), 20.0);
        let mut g = Graph::new(Mode::Train);
        let a = g.constant(randn(&mut rng, &[4, 5, 5]));
        let b = g.constant(randn(&mut rng, &[4, 5, 5]));
        let m = lvl.gate_map(&mut g, &store, a, b).unwrap();
        assert!(g.value(m).data().iter().all(|v| *v >= 1.0 - 1e-8));
    }

    #[test]
    fn zeroed_refinement_is_the_identity() {
        let (mut store, lvl, mut rng) = fixture(4);
        set(&mut store, lvl.refine_conv.weight, 0.0);
        set(&mut store, lvl.refine_norm.gamma, 0.0);
        let a = randn(&mut rng, &[4, 6, 6]);
        let mut g = Graph::new(Mode::Train);
        let (av, bv) = (g.constant(a.clone()), g.constant(randn(&mut rng, &[4, 6, 6])));
        let y = lvl.fuse_level(&mut g, &store, av, bv).unwrap();
        assert!(g.value(y).bitwise_eq(&a));
    }

    #[test]
    fn saturated_gate_matches_ungated_composition() {
        let (mut store, lvl, mut rng) = fixture(5);
        set(&mut store, lvl.gate_conv.weight, 0.0);
        set(&mut store, lvl.gate_out.weight, 0.0);
        set(&mut store, lvl.gate_out.bias.unwrap(), 40.0);
        let mut g = Graph::new(Mode::Train);
        let a = g.constant(randn(&mut rng, &[4, 6, 6]));
        let b = g.constant(randn(&mut rng, &[4, 6, 6]));
        let t = lvl.trace(&mut g, &store, a, b).unwrap();
        let sum = g.add(t.img_t, t.edm_t).unwrap();
        let r = lvl.refine_conv.forward(&mut g, &store, sum).unwrap();
        let r = lvl.refine_norm.forward(&mut g, &store, r).unwrap();
        let r = g.relu(r).unwrap();
        let want = g.add(r, a).unwrap();
        assert!(g.value(t.out).max_abs_diff(g.value(want)) < 1e-12);
    }

    #[test]
    fn both_transforms_receive_gradient() {
        let (store, lvl, mut rng) = fixture(6);
        let mut g = Graph::new(Mode::Train);
        let a = g.constant(randn(&mut rng, &[4, 6, 6]));
        let b = g.constant(randn(&mut rng, &[4, 6, 6]));
        let y = lvl.fuse_level(&mut g, &store, a, b).unwrap();
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.param(lvl.transform_img.weight).unwrap().norm() > 0.0);
        assert!(grads.param(lvl.transform_edm.weight).unwrap().norm() > 0.0);
    }

    #[test]
    fn pyramid_levels_are_independent() {
        let widths = [4, 4, 8, 8];
        let sides = [8, 4, 2, 1];
        let mut rng = Prng::new(7);
        let mut store = ParamStore::new();
        let f = DepthFusion::new(&mut store, "fusion", &widths, &mut rng).unwrap();
        let img: Vec<Tensor> = (0..4).map(|i| randn(&mut rng, &[widths[i], sides[i], sides[i]])).collect();
        let edm: Vec<Tensor> = (0..4).map(|i| randn(&mut rng, &[widths[i], sides[i], sides[i]])).collect();
        let run = |img: &[Tensor]| {
            let mut g = Graph::new(Mode::Train);
            let ip = FeaturePyramid { levels: img.iter().map(|t| g.constant(t.clone())).collect() };
            let ep = FeaturePyramid { levels: edm.iter().map(|t| g.constant(t.clone())).collect() };
            let out = f.fuse_pyramid(&mut g, &store, &ip, &ep).unwrap();
            out.levels.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>()
        };
        let base = run(&img);
        let mut bumped = img.clone();
        bumped[1] = bumped[1].map(|v| 2.0 * v);
        let moved = run(&bumped);
        for i in 0..4 {
            assert_eq!(base[i].shape(), img[i].shape());
            assert_eq!(base[i].bitwise_eq(&moved[i]), i != 1);
        }
    }
}
