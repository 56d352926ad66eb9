//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass as a node that
//! caches its value. Nodes are appended in evaluation order, so the tape is
//! a topological order of the computation and [`Graph::backward`] can
//! accumulate gradients in a single reverse sweep.
//!
//! Parameters enter the tape through [`Graph::param`]. Inside a
//! [`Graph::frozen`] scope parameters are loaded as detached constants:
//! the forward math is identical, but no gradient reaches the stored
//! parameter through that path.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::params::{ParamId, ParamStore, StatsId, StatsUpdate};
use crate::tensor::{same_shape, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
    Softplus,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "silu" => Ok(Self::Silu),
            "sigmoid" => Ok(Self::Sigmoid),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Gelu => x * kernels::normal_cdf(x),
            Self::Silu => x * kernels::sigmoid(x),
            Self::Sigmoid => kernels::sigmoid(x),
            Self::Softplus => kernels::softplus(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Gelu => kernels::normal_cdf(x) + x * kernels::normal_pdf(x),
            Self::Silu => {
                let s = kernels::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Self::Sigmoid => y * (1.0 - y),
            Self::Softplus => kernels::sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize },
    CausalDwConv1d { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Act { x: Var, kind: Activation },
    Exp { x: Var },
    Scale { x: Var, c: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulSpatial { x: Var, m: Var },
    MulChannel { x: Var, a: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64> },
    GlobalAvgPool { x: Var },
    Upsample { x: Var },
    AdaptivePool { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Scan { x: Var, delta: Var, a: Var, b: Var, c: Var, states: Vec<f64> },
    WeightedCe { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Mse { a: Var, b: Var },
    GradLoss { pred: Var, gt: Var, mask: Vec<bool>, n_changed: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            CausalDwConv1d { x, w, b } => vec![*x, *w, *b],
            MatMul { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } | Mse { a, b } => vec![*a, *b],
            Transpose { x }
            | Reshape { x }
            | Act { x, .. }
            | Exp { x }
            | Scale { x, .. }
            | GlobalAvgPool { x }
            | Upsample { x }
            | AdaptivePool { x }
            | Slice { x, .. }
            | Softmax { x }
            | Sum { x }
            | Mean { x } => vec![*x],
            MulSpatial { x, m } => vec![*x, *m],
            MulChannel { x, a } => vec![*x, *a],
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
            Scan { x, delta, a, b, c, .. } => vec![*x, *delta, *a, *b, *c],
            WeightedCe { logits, .. } => vec![*logits],
            GradLoss { pred, gt, .. } => vec![*pred, *gt],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a stored parameter through its trainable (non-frozen) leaf.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Gradient map keyed by parameter name. Frozen, non-trainable and
    /// unreached parameters report an all-zero tensor.
    pub fn by_name(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(id, p)| {
                let g = match self.param(id) {
                    Some(g) if p.trainable => g.clone(),
                    _ => Tensor::zeros(p.value.shape()),
                };
                (p.name.clone(), g)
            })
            .collect()
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    frozen_depth: usize,
    param_vars: HashMap<ParamId, Var>,
    frozen_param_vars: HashMap<ParamId, Var>,
    stats_updates: Vec<StatsUpdate>,
    backward_done: bool,
    kinks: u64,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            frozen_depth: 0,
            param_vars: HashMap::new(),
            frozen_param_vars: HashMap::new(),
            stats_updates: Vec::new(),
            backward_done: false,
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Running-statistics updates recorded by batch-norm layers in train mode.
    pub fn take_stats_updates(&mut self) -> Vec<StatsUpdate> {
        std::mem::take(&mut self.stats_updates)
    }

    /// Runs `f` with parameters loaded as detached constants.
    pub fn frozen<T>(&mut self, f: impl FnOnce(&mut Graph) -> T) -> T {
        self.frozen_depth += 1;
        let out = f(self);
        self.frozen_depth -= 1;
        out
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_depth > 0
    }

    /// Hash of the branch taken at every non-differentiable point (ReLU and
    /// absolute-value arguments) so far. Two passes with equal signatures lie
    /// on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn record_kinks(&mut self, signs: impl Iterator<Item = bool>) {
        let mut h = self.kinks;
        for s in signs {
            h = (h ^ s as u64).wrapping_mul(0x0100_0000_01b3);
        }
        self.kinks = h;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?} at node {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Internal(format!("variable {} not on this graph", v.0)));
        }
        Ok(())
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a stored parameter. One leaf per parameter per graph, so every
    /// use of a shared weight accumulates into the same gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let frozen = self.is_frozen();
        let cache = if frozen {
            &self.frozen_param_vars
        } else {
            &self.param_vars
        };
        if let Some(v) = cache.get(&id) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.trainable && !frozen,
        });
        let v = Var(self.nodes.len() - 1);
        if frozen {
            self.frozen_param_vars.insert(id, v);
        } else {
            self.param_vars.insert(id, v);
        }
        v
    }

    // ----- primitives -------------------------------------------------

    /// Zero-padded cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`.
    ///
    /// Output extents follow `floor((H + 2·pad − k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, pad, PadMode::Zeros)
    }

    /// [`Graph::conv2d`] with an explicit border rule.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (c_in, h, wd) = self.value(x).dims3()?;
        let (c_out, wc_in, k, k2) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::dim(format!("conv2d: input has {c_in} channels, kernel expects {wc_in}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::config(format!("conv2d: kernel must be square and odd, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::config(format!(
                "conv2d: padded input {}x{} smaller than kernel {k}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim(format!("conv2d: bias shape {:?}, expected [{c_out}]", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
            pad_mode,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        let t = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        self.push(t, Op::Conv2d { x, w, b, geom, c_out })
    }

    /// Causal depthwise 1D convolution over the token axis of `x: [L, D]`
    /// with `w: [D, k]` and `b: [D]`; position `t` sees tokens `t-k+1..=t`.
    pub fn causal_dwconv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let (wd, k) = self.value(w).dims2()?;
        if wd != d || self.value(b).shape() != [d] {
            return Err(Error::dim(format!("causal_dwconv1d: {d} channels vs kernel {wd}")));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for c in 0..d {
                let mut s = bv[c];
                for j in 0..k {
                    let src = t as isize - (k - 1) as isize + j as isize;
                    if src >= 0 {
                        s += wv[c * k + j] * xv[src as usize * d + c];
                    }
                }
                out[t * d + c] = s;
            }
        }
        self.push(Tensor::from_parts(vec![l, d], out), Op::CausalDwConv1d { x, w, b })
    }

    /// `x · w + b` for `x: [L, C_in]`, `w: [C_in, C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (l, c_in) = self.value(x).dims2()?;
        let (wc_in, c_out) = self.value(w).dims2()?;
        if wc_in != c_in {
            return Err(Error::dim(format!("linear: input width {c_in}, weight expects {wc_in}")));
        }
        let mut out = vec![0.0; l * c_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [c_out] {
                return Err(Error::dim(format!("linear: bias shape {:?}, expected [{c_out}]", bv.shape())));
            }
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(l, c_in, c_out, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        self.push(Tensor::from_parts(vec![l, c_out], out), Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner extents {k} and {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let t = transpose2(self.value(x).data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], t), Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// `[C, H, W]` feature map to a row-major `[H·W, C]` token sequence.
    pub fn to_seq(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(flat)
    }

    /// Inverse of [`Graph::to_seq`].
    pub fn from_seq(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (l, c) = self.value(x).dims2()?;
        if l != h * w {
            return Err(Error::dim(format!("from_seq: {l} tokens do not fill {h}x{w}")));
        }
        let t = self.transpose(x)?;
        self.reshape(t, &[c, h, w])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if kind == Activation::Relu {
            let signs: Vec<bool> = self.value(x).data().iter().map(|v| *v > 0.0).collect();
            self.record_kinks(signs.into_iter());
        }
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(t, Op::Mul { a, b })
    }

    /// `x: [C,H,W] ⊙ m: [1,H,W]`, broadcasting the map over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(m).shape() != [1, h, w] {
            return Err(Error::dim(format!("mul_spatial: map {:?} vs features {:?}", self.value(m).shape(), [c, h, w])));
        }
        let mv = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for plane in out.chunks_mut(h * w) {
            for (o, g) in plane.iter_mut().zip(mv) {
                *o *= g;
            }
        }
        self.push(Tensor::from_parts(vec![c, h, w], out), Op::MulSpatial { x, m })
    }

    /// `x: [C,H,W] ⊙ a: [C]`, broadcasting the weights spatially.
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(a).shape() != [c] {
            return Err(Error::dim(format!("mul_channel: weights {:?} vs {c} channels", self.value(a).shape())));
        }
        let av = self.value(a).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            for o in plane {
                *o *= av[ch];
            }
        }
        self.push(Tensor::from_parts(vec![c, h, w], out), Op::MulChannel { x, a })
    }

    /// Per-channel normalization over the spatial extent of `x: [C,H,W]`.
    ///
    /// In train mode the statistics come from `x` itself (batch of one) and,
    /// outside a frozen scope, a running-statistics update is recorded. In
    /// eval mode the running statistics of `stats` are used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, store: &ParamStore, stats: StatsId) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim(format!("batch_norm: affine parameters must have length {c}")));
        }
        let m = h * w;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let plane = &xv[ch * m..(ch + 1) * m];
                    let mu = plane.iter().sum::<f64>() / m as f64;
                    mean[ch] = mu;
                    var[ch] = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                }
                (mean, var, true)
            }
            Mode::Eval => {
                let s = store.stats(stats);
                (s.mean.clone(), s.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            for i in 0..m {
                out[ch * m + i] = gv[ch] * (xv[ch * m + i] - mean[ch]) * inv_std[ch] + bv[ch];
            }
        }
        if batch_stats && !self.is_frozen() {
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            self.stats_updates.push(StatsUpdate {
                id: stats,
                mean: mean.clone(),
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats },
        )
    }

    /// Per-token normalization over the channel axis of `x: [L, C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (l, c) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim(format!("layer_norm: affine parameters must have length {c}")));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; l * c];
        let mut inv_std = vec![0.0; l];
        for t in 0..l {
            let row = &xv[t * c..(t + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[t] = inv;
            for j in 0..c {
                out[t * c + j] = gv[j] * (row[j] - mu) * inv + bv[j];
            }
        }
        self.push(Tensor::from_parts(vec![l, c], out), Op::LayerNorm { x, gamma, beta, inv_std })
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let xv = self.value(x);
        let out: Vec<f64> = (0..c).map(|ch| xv.channel(ch).iter().sum::<f64>() / (h * w) as f64).collect();
        self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool { x })
    }

    /// Align-corners-false bilinear upsampling of `[C,h,w]` to `[C,out_h,out_w]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h < h || out_w < w {
            return Err(Error::config(format!("upsample_bilinear: cannot downscale {h}x{w} to {out_h}x{out_w}")));
        }
        if out_h == h && out_w == w {
            return Ok(x);
        }
        let out = kernels::upsample_forward(self.value(x).data(), c, h, w, out_h, out_w);
        self.push(Tensor::from_parts(vec![c, out_h, out_w], out), Op::Upsample { x })
    }

    /// Adaptive average pooling with overlapping bins when upsizing.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("adaptive_avg_pool: zero output extent"));
        }
        let out = kernels::adaptive_pool_forward(self.value(x).data(), c, h, w, out_h, out_w);
        self.push(Tensor::from_parts(vec![c, out_h, out_w], out), Op::AdaptivePool { x })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!("concat: shape {s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim(format!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(Tensor::from_parts(new_shape, out), Op::Slice { x, axis, start })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = softmax_last(self.value(x));
        self.push(t, Op::Softmax { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Selective state-space recurrence, one independent scan per channel:
    ///
    /// `h_t = exp(Δ_t·A) ⊙ h_{t−1} + Δ_t·B_t·x_t`, `y_t = ⟨C_t, h_t⟩`, `h_0 = 0`,
    ///
    /// with `x, delta: [L, D]`, `a: [D, N]`, `b, c: [L, N]`.
    pub fn scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let (ad, n) = self.value(a).dims2()?;
        if self.value(delta).shape() != [l, d] || ad != d || self.value(b).shape() != [l, n] || self.value(c).shape() != [l, n] {
            return Err(Error::dim(format!(
                "scan: x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                self.value(x).shape(),
                self.value(delta).shape(),
                self.value(a).shape(),
                self.value(b).shape(),
                self.value(c).shape()
            )));
        }
        let (xv, dv, av, bv, cv) = (
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let mut states = vec![0.0; l * d * n];
        let mut y = vec![0.0; l * d];
        let mut h = vec![0.0; n];
        for ch in 0..d {
            h.fill(0.0);
            for t in 0..l {
                let dt = dv[t * d + ch];
                let u = xv[t * d + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    h[s] = (dt * av[ch * n + s]).exp() * h[s] + dt * bv[t * n + s] * u;
                    acc += cv[t * n + s] * h[s];
                }
                if !acc.is_finite() || h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("scan: non-finite state at step {t}, channel {ch}")));
                }
                y[t * d + ch] = acc;
                states[(t * d + ch) * n..(t * d + ch + 1) * n].copy_from_slice(&h);
            }
        }
        self.push(Tensor::from_parts(vec![l, d], y), Op::Scan { x, delta, a, b, c, states })
    }

    /// Class-weighted cross-entropy of `logits: [K,H,W]` against per-pixel labels,
    /// averaged over all pixels (the weights do not enter the denominator).
    pub fn weighted_ce(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (k, h, w) = self.value(logits).dims3()?;
        let n = h * w;
        if k < 2 {
            return Err(Error::config("weighted_ce needs at least 2 classes"));
        }
        if labels.len() != n {
            return Err(Error::dim(format!("weighted_ce: {} labels for {n} pixels", labels.len())));
        }
        if weights.len() != k {
            return Err(Error::dim(format!("weighted_ce: {} weights for {k} classes", weights.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; k * n];
        let mut loss = 0.0;
        for p in 0..n {
            let mx = (0..k).map(|c| z[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = (0..k).map(|c| (z[c * n + p] - mx).exp()).sum();
            let lse = mx + se.ln();
            for c in 0..k {
                probs[c * n + p] = (z[c * n + p] - lse).exp();
            }
            let l = labels[p];
            loss -= weights[l] * (z[l * n + p] - lse);
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::WeightedCe { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs },
        )
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, gt: Var) -> Result<Var> {
        same_shape(self.value(pred), self.value(gt))?;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(gt).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let n = self.value(pred).numel() as f64;
        self.push(Tensor::scalar(s / n), Op::Mse { a: pred, b: gt })
    }

    /// Forward-difference gradient discrepancy inside the change mask.
    ///
    /// Pixel `(i, j)` in the mask contributes a horizontal term when
    /// `j + 1 < W` and a vertical term when `i + 1 < H`; the sum is divided
    /// by the number of masked pixels (0 when the mask is empty).
    pub fn grad_loss(&mut self, pred: Var, gt: Var, mask: &[bool]) -> Result<Var> {
        same_shape(self.value(pred), self.value(gt))?;
        let (h, w) = spatial_extent(self.value(pred))?;
        if mask.len() != h * w {
            return Err(Error::dim(format!("grad_loss: mask of {} for {h}x{w}", mask.len())));
        }
        let n_changed = mask.iter().filter(|m| **m).count();
        let (p, g) = (self.value(pred).data(), self.value(gt).data());
        let mut s = 0.0;
        let mut signs = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let o = i * w + j;
                if !mask[o] {
                    continue;
                }
                if j + 1 < w {
                    let d = (p[o + 1] - p[o]) - (g[o + 1] - g[o]);
                    signs.push(d > 0.0);
                    s += d.abs();
                }
                if i + 1 < h {
                    let d = (p[o + w] - p[o]) - (g[o + w] - g[o]);
                    signs.push(d > 0.0);
                    s += d.abs();
                }
            }
        }
        self.record_kinks(signs.into_iter());
        let v = if n_changed == 0 { 0.0 } else { s / n_changed as f64 };
        self.push(Tensor::scalar(v), Op::GradLoss { pred, gt, mask: mask.to_vec(), n_changed })
    }

    // ----- reverse sweep ---------------------------------------------

    /// Accumulates gradients of the scalar `loss` over the whole tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph; call reset_backward first".into()));
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(Error::Internal(format!("cycle: node {i} reads node {}", inp.0)));
                }
            }
            let contributions = self.local_grads(i, &dy)?;
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    /// Allows another [`Graph::backward`] call on the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn local_grads(&self, i: usize, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let d = dy.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, c_out } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x).data(), val(*w).data(), d, *c_out, geom, need(*x));
                if let Some(dx) = dx {
                    out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
                }
                out.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), dw)));
                if let Some(b) = b {
                    out.push((*b, Tensor::from_parts(vec![*c_out], db)));
                }
            }
            Op::CausalDwConv1d { x, w, b } => {
                let (l, dch) = val(*x).dims2()?;
                let k = val(*w).shape()[1];
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let mut dx = vec![0.0; l * dch];
                let mut dw = vec![0.0; dch * k];
                let mut db = vec![0.0; dch];
                for t in 0..l {
                    for c in 0..dch {
                        let g = d[t * dch + c];
                        db[c] += g;
                        for j in 0..k {
                            let src = t as isize - (k - 1) as isize + j as isize;
                            if src >= 0 {
                                let s = src as usize * dch + c;
                                dx[s] += wv[c * k + j] * g;
                                dw[c * k + j] += xv[s] * g;
                            }
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(vec![l, dch], dx)));
                out.push((*w, Tensor::from_parts(vec![dch, k], dw)));
                out.push((*b, Tensor::from_parts(vec![dch], db)));
            }
            Op::Linear { x, w, b } => {
                let (l, c_in) = val(*x).dims2()?;
                let c_out = val(*w).shape()[1];
                if need(*x) {
                    let mut dx = vec![0.0; l * c_in];
                    kernels::gemm(l, c_out, c_in, d, false, val(*w).data(), true, &mut dx, 0.0);
                    out.push((*x, Tensor::from_parts(vec![l, c_in], dx)));
                }
                if need(*w) {
                    let mut dw = vec![0.0; c_in * c_out];
                    kernels::gemm(c_in, l, c_out, val(*x).data(), true, d, false, &mut dw, 0.0);
                    out.push((*w, Tensor::from_parts(vec![c_in, c_out], dw)));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; c_out];
                    for row in d.chunks(c_out) {
                        for (a, g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    out.push((*b, Tensor::from_parts(vec![c_out], db)));
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[1];
                if need(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, d, false, val(*b).data(), true, &mut da, 0.0);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if need(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a).data(), true, d, false, &mut db, 0.0);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::Transpose { x } => {
                let (r, c) = val(*x).dims2()?;
                out.push((*x, Tensor::from_parts(vec![r, c], transpose2(d, c, r))));
            }
            Op::Reshape { x } => {
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), d.to_vec())));
            }
            Op::Act { x, kind } => {
                let xv = val(*x).data();
                let yv = node.value.data();
                let g: Vec<f64> = (0..d.len()).map(|j| d[j] * kind.derivative(xv[j], yv[j])).collect();
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), g)));
            }
            Op::Exp { x } => {
                let g: Vec<f64> = d.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), g)));
            }
            Op::Scale { x, c } => {
                out.push((*x, dy.map(|g| g * c)));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|g| -g)));
            }
            Op::Mul { a, b } => {
                out.push((*a, dy.zip_map(val(*b), |g, v| g * v)?));
                out.push((*b, dy.zip_map(val(*a), |g, v| g * v)?));
            }
            Op::MulSpatial { x, m } => {
                let (c, h, w) = val(*x).dims3()?;
                let (xv, mv) = (val(*x).data(), val(*m).data());
                let p = h * w;
                let mut dx = vec![0.0; c * p];
                let mut dm = vec![0.0; p];
                for ch in 0..c {
                    for j in 0..p {
                        let g = d[ch * p + j];
                        dx[ch * p + j] = g * mv[j];
                        dm[j] += g * xv[ch * p + j];
                    }
                }
                out.push((*x, Tensor::from_parts(vec![c, h, w], dx)));
                out.push((*m, Tensor::from_parts(vec![1, h, w], dm)));
            }
            Op::MulChannel { x, a } => {
                let (c, h, w) = val(*x).dims3()?;
                let (xv, av) = (val(*x).data(), val(*a).data());
                let p = h * w;
                let mut dx = vec![0.0; c * p];
                let mut da = vec![0.0; c];
                for ch in 0..c {
                    for j in 0..p {
                        let g = d[ch * p + j];
                        dx[ch * p + j] = g * av[ch];
                        da[ch] += g * xv[ch * p + j];
                    }
                }
                out.push((*x, Tensor::from_parts(vec![c, h, w], dx)));
                out.push((*a, Tensor::from_parts(vec![c], da)));
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let (c, h, w) = val(*x).dims3()?;
                let m = h * w;
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut dx = vec![0.0; c * m];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let range = ch * m..(ch + 1) * m;
                    let xhat: Vec<f64> = xv[range.clone()].iter().map(|v| (v - mean[ch]) * inv_std[ch]).collect();
                    let g = &d[range.clone()];
                    let sum_g: f64 = g.iter().sum();
                    let sum_gx: f64 = g.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    dg[ch] = sum_gx;
                    db[ch] = sum_g;
                    let scale = gv[ch] * inv_std[ch];
                    for (j, idx) in range.enumerate() {
                        dx[idx] = if *batch_stats {
                            scale * (g[j] - sum_g / m as f64 - xhat[j] * sum_gx / m as f64)
                        } else {
                            scale * g[j]
                        };
                    }
                }
                out.push((*x, Tensor::from_parts(vec![c, h, w], dx)));
                out.push((*gamma, Tensor::from_parts(vec![c], dg)));
                out.push((*beta, Tensor::from_parts(vec![c], db)));
            }
            Op::LayerNorm { x, gamma, beta, inv_std } => {
                let (l, c) = val(*x).dims2()?;
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut dx = vec![0.0; l * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for t in 0..l {
                    let row = &xv[t * c..(t + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        xhat[j] = (row[j] - mu) * inv_std[t];
                        let g = d[t * c + j];
                        dg[j] += g * xhat[j];
                        db[j] += g;
                        dxhat[j] = g * gv[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[t * c + j] = inv_std[t] * (dxhat[j] - s1 / c as f64 - xhat[j] * s2 / c as f64);
                    }
                }
                out.push((*x, Tensor::from_parts(vec![l, c], dx)));
                out.push((*gamma, Tensor::from_parts(vec![c], dg)));
                out.push((*beta, Tensor::from_parts(vec![c], db)));
            }
            Op::GlobalAvgPool { x } => {
                let (c, h, w) = val(*x).dims3()?;
                let m = (h * w) as f64;
                let g: Vec<f64> = (0..c).flat_map(|ch| std::iter::repeat_n(d[ch] / m, h * w)).collect();
                out.push((*x, Tensor::from_parts(vec![c, h, w], g)));
            }
            Op::Upsample { x } => {
                let (c, h, w) = val(*x).dims3()?;
                let (_, oh, ow) = node.value.dims3()?;
                let g = kernels::upsample_backward(d, c, h, w, oh, ow);
                out.push((*x, Tensor::from_parts(vec![c, h, w], g)));
            }
            Op::AdaptivePool { x } => {
                let (c, h, w) = val(*x).dims3()?;
                let (_, oh, ow) = node.value.dims3()?;
                let g = kernels::adaptive_pool_backward(d, c, h, w, oh, ow);
                out.push((*x, Tensor::from_parts(vec![c, h, w], g)));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = val(*p).shape();
                    let chunk = ps[*axis] * inner;
                    if need(*p) {
                        let mut g = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            g.extend_from_slice(&d[o * total + offset..o * total + offset + chunk]);
                        }
                        out.push((*p, Tensor::from_parts(ps.to_vec(), g)));
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut g = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), g)));
            }
            Op::Softmax { x } => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(d.chunks(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), g)));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(val(*x).shape(), d[0])));
            }
            Op::Mean { x } => {
                let n = val(*x).numel() as f64;
                out.push((*x, Tensor::full(val(*x).shape(), d[0] / n)));
            }
            Op::Scan { x, delta, a, b, c, states } => {
                let (l, dch) = val(*x).dims2()?;
                let n = val(*a).shape()[1];
                let (xv, dv, av, bv, cv) =
                    (val(*x).data(), val(*delta).data(), val(*a).data(), val(*b).data(), val(*c).data());
                let mut dx = vec![0.0; l * dch];
                let mut ddelta = vec![0.0; l * dch];
                let mut da = vec![0.0; dch * n];
                let mut db = vec![0.0; l * n];
                let mut dc = vec![0.0; l * n];
                let mut dh = vec![0.0; n];
                for ch in 0..dch {
                    dh.fill(0.0);
                    for t in (0..l).rev() {
                        let gy = d[t * dch + ch];
                        let dt = dv[t * dch + ch];
                        let u = xv[t * dch + ch];
                        let h_t = &states[(t * dch + ch) * n..(t * dch + ch + 1) * n];
                        let h_prev = (t > 0).then(|| &states[((t - 1) * dch + ch) * n..((t - 1) * dch + ch + 1) * n]);
                        for s in 0..n {
                            dh[s] += gy * cv[t * n + s];
                            dc[t * n + s] += gy * h_t[s];
                            let a_cs = av[ch * n + s];
                            let abar = (dt * a_cs).exp();
                            let dabar = dh[s] * h_prev.map_or(0.0, |hp| hp[s]);
                            ddelta[t * dch + ch] += dabar * abar * a_cs + dh[s] * bv[t * n + s] * u;
                            da[ch * n + s] += dabar * abar * dt;
                            db[t * n + s] += dh[s] * dt * u;
                            dx[t * dch + ch] += dh[s] * dt * bv[t * n + s];
                            dh[s] *= abar;
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(vec![l, dch], dx)));
                out.push((*delta, Tensor::from_parts(vec![l, dch], ddelta)));
                out.push((*a, Tensor::from_parts(vec![dch, n], da)));
                out.push((*b, Tensor::from_parts(vec![l, n], db)));
                out.push((*c, Tensor::from_parts(vec![l, n], dc)));
            }
            Op::WeightedCe { logits, labels, weights, probs } => {
                let (k, h, w) = val(*logits).dims3()?;
                let n = h * w;
                let mut g = probs.clone();
                for (p, &l) in labels.iter().enumerate() {
                    let wl = weights[l] * d[0] / n as f64;
                    for c in 0..k {
                        let onehot = if c == l { 1.0 } else { 0.0 };
                        g[c * n + p] = wl * (probs[c * n + p] - onehot);
                    }
                }
                out.push((*logits, Tensor::from_parts(vec![k, h, w], g)));
            }
            Op::Mse { a, b } => {
                let n = val(*a).numel() as f64;
                let ga = val(*a).zip_map(val(*b), |p, t| 2.0 * (p - t) / n * d[0])?;
                out.push((*b, ga.map(|v| -v)));
                out.push((*a, ga));
            }
            Op::GradLoss { pred, gt, mask, n_changed } => {
                let (h, w) = spatial_extent(val(*pred))?;
                let mut gp = vec![0.0; h * w];
                if *n_changed > 0 {
                    let (p, t) = (val(*pred).data(), val(*gt).data());
                    let s = d[0] / *n_changed as f64;
                    for i in 0..h {
                        for j in 0..w {
                            let o = i * w + j;
                            if !mask[o] {
                                continue;
                            }
                            if j + 1 < w {
                                let e = (p[o + 1] - p[o]) - (t[o + 1] - t[o]);
                                let sg = s * sign(e);
                                gp[o + 1] += sg;
                                gp[o] -= sg;
                            }
                            if i + 1 < h {
                                let e = (p[o + w] - p[o]) - (t[o + w] - t[o]);
                                let sg = s * sign(e);
                                gp[o + w] += sg;
                                gp[o] -= sg;
                            }
                        }
                    }
                }
                let shape = val(*pred).shape().to_vec();
                let gp = Tensor::from_parts(shape, gp);
                out.push((*gt, gp.map(|v| -v)));
                out.push((*pred, gp));
            }
        }
        Ok(out)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(H, W)` of a `[1,H,W]` or `[H,W]` map.
fn spatial_extent(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(Error::dim(format!("expected a single-channel map, got {s:?}"))),
    }
}

fn transpose2(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::CausalDwConv1d { .. } => "causal_dwconv1d",
        Op::Linear { .. } => "linear",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Act { .. } => "activation",
        Op::Exp { .. } => "exp",
        Op::Scale { .. } => "scale",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::MulSpatial { .. } => "mul_spatial",
        Op::MulChannel { .. } => "mul_channel",
        Op::BatchNorm { .. } => "batch_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Upsample { .. } => "upsample_bilinear",
        Op::AdaptivePool { .. } => "adaptive_avg_pool",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Softmax { .. } => "softmax",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Scan { .. } => "scan",
        Op::WeightedCe { .. } => "weighted_ce",
        Op::Mse { .. } => "mse",
        Op::GradLoss { .. } => "grad_loss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNorm;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn identity_conv_is_exact() {
        let mut g = Graph::new(Mode::Train);
        let x = Tensor::from_fn(&[1, 4, 5], |i| (i as f64).sin());
        let xv = g.constant(x.clone());
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(xv, w, None, 1, 0).unwrap();
        assert!(g.value(y).bitwise_eq(&x));
    }

    #[test]
    fn conv_hand_stencil_and_shape() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::full(&[1, 3, 3], 2.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).at(&[0, 1, 1]), 18.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(g.value(y).at(&[0, r, c]), 8.0);
        }
        let x = g.constant(Tensor::zeros(&[4, 16, 16]));
        let w = g.constant(Tensor::zeros(&[8, 4, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 16, 16]);
    }

    #[test]
    fn linear_hand_dot_product() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[3.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let x = g.constant(Tensor::zeros(&[64, 32]));
        let w = g.constant(Tensor::zeros(&[32, 8]));
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.shape(y), &[64, 8]);
    }

    /// `Φ(x)` by its Taylor series, independent of any erf routine.
    fn phi_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / (2.0 * n as f64);
            sum += term / (2 * n + 1) as f64;
        }
        0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[3], &[0.0, -1.0, 1.0]));
        let s = g.sigmoid(x).unwrap();
        let si = g.silu(x).unwrap();
        let r = g.relu(x).unwrap();
        let ge = g.gelu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(si).data()[0], 0.0);
        assert_eq!(g.value(r).data()[1], 0.0);
        close(g.value(ge).data()[2], phi_series(1.0), 1e-14);
        close(g.value(ge).data()[2], 0.8413447, 5e-8);
    }

    #[test]
    fn batch_norm_examples() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[2, 1, 2], &[1.0, 3.0, 4.0, 4.0]));
        let y = bn.forward(&mut g, &store, x).unwrap();
        let e = 1.0 / (1.0 + 1e-5f64).sqrt();
        let v = g.value(y).data();
        close(v[0], -e, 1e-15);
        close(v[1], e, 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);

        store.get_mut(bn.gamma).value = Tensor::zeros(&[2]);
        store.get_mut(bn.beta).value = Tensor::full(&[2], 5.0);
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::from_fn(&[2, 3, 3], |i| (i * i) as f64));
        let y = bn.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 5.0));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[2, 2, 2], &[7.0, 7.0, 7.0, 7.0, 0.0, 2.0, 4.0, 6.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[7.0, 3.0]);
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
        let y = g.upsample_bilinear(x, 4, 4).unwrap();
        let v = g.value(y);
        let center = [v.at(&[0, 1, 1]), v.at(&[0, 1, 2]), v.at(&[0, 2, 1]), v.at(&[0, 2, 2])];
        assert_eq!(center, [1.5, 2.5, 3.5, 4.5]);
        let one = g.constant(t(&[1, 1, 1], &[9.0]));
        let y = g.upsample_bilinear(one, 4, 4).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 9.0));
        let c = g.constant(Tensor::full(&[2, 3, 5], 3.0));
        let y = g.upsample_bilinear(c, 7, 6).unwrap();
        assert!(g.value(y).data().iter().all(|v| (*v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 1000.0, 0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let v = g.value(s).data();
        close(v[0], 0.26894, 5e-6);
        close(v[1], 0.73106, 5e-6);
        assert!((v[2] - 1.0).abs() < 1e-15 && v[3] < 1e-300);
        close(v[4], 0.5, 1e-15);
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert!(g.value(s).data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn backward_of_linear_and_quadratic_functionals() {
        let x0 = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let mut g = Graph::new(Mode::Train);
        let x = g.input(x0.clone());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|v| *v == 1.0));

        let mut g = Graph::new(Mode::Train);
        let x = g.input(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        assert!(grads.wrt(x).unwrap().bitwise_eq(&x0));
    }

    #[test]
    fn weighted_ce_gradient_matches_hand_derivative() {
        let z = [0.3, -1.2, 0.7, 0.4];
        let labels = [0, 1];
        let w = [0.05, 0.95];
        let mut g = Graph::new(Mode::Train);
        let logits = g.input(t(&[2, 1, 2], &z));
        let l = g.weighted_ce(logits, &labels, &w).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.wrt(logits).unwrap();
        for p in 0..2 {
            let (a, b) = (z[p], z[2 + p]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let soft = [ea / (ea + eb), eb / (ea + eb)];
            for (k, &s) in soft.iter().enumerate() {
                let onehot = if labels[p] == k { 1.0 } else { 0.0 };
                close(d.data()[k * 2 + p], (s - onehot) * w[labels[p]] / 2.0, 1e-15);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        let mut g = Graph::new(Mode::Train);
        let z = g.constant(Tensor::zeros(&[2, 1, 2]));
        let l = g.weighted_ce(z, &[0, 1], &[0.05, 0.95]).unwrap();
        close(g.value(l).item().unwrap(), 0.5 * ln2, 1e-15);
        let l = g.weighted_ce(z, &[1, 1], &[1.0, 1.0]).unwrap();
        close(g.value(l).item().unwrap(), ln2, 1e-15);
        let sat = g.constant(t(&[2, 1, 1], &[0.0, 800.0]));
        let l = g.weighted_ce(sat, &[1], &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let p = g.constant(t(&[1, 1, 2], &[1.0, 3.0]));
        let zero = g.constant(Tensor::zeros(&[1, 1, 2]));
        let m = g.mse(p, zero).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 5.0);
        let shifted = g.constant(t(&[1, 1, 2], &[2.0, 2.0]));
        let m = g.mse(shifted, zero).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 4.0);

        let pred = g.constant(t(&[1, 1, 2], &[0.0, 3.0]));
        let gt = g.constant(t(&[1, 1, 2], &[0.0, 1.0]));
        let gl = g.grad_loss(pred, gt, &[true, false]).unwrap();
        assert_eq!(g.value(gl).item().unwrap(), 2.0);
        let gl = g.grad_loss(gt, gt, &[true, true]).unwrap();
        assert_eq!(g.value(gl).item().unwrap(), 0.0);
    }

    #[test]
    fn frozen_and_untrainable_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[3], 2.0)).unwrap();
        let b = store.add("b", Tensor::full(&[3], 3.0)).unwrap();
        store.get_mut(b).trainable = false;
        let mut g = Graph::new(Mode::Train);
        let av = g.frozen(|g| g.param(&store, a));
        let bv = g.param(&store, b);
        let y = g.mul(av, bv).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let by_name = grads.by_name(&store);
        assert!(by_name["a"].data().iter().all(|v| *v == 0.0));
        assert!(by_name["b"].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_scope_reuses_one_detached_leaf() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.5)).unwrap();
        let mut g = Graph::new(Mode::Train);
        let live = g.param(&store, a);
        let (d1, d2) = g.frozen(|g| (g.param(&store, a), g.param(&store, a)));
        assert_eq!(d1, d2);
        assert_ne!(live, d1);
        assert!(g.requires_grad(live) && !g.requires_grad(d1));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::new(Mode::Train);
            let x = g.constant(Tensor::from_fn(&[3, 6, 6], |i| (i as f64 * 0.37).cos()));
            let w = g.constant(Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f64 * 0.11).sin()));
            let y = g.conv2d(x, w, None, 2, 1).unwrap();
            let y = g.gelu(y).unwrap();
            g.value(y).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn kink_signature_tracks_relu_branches() {
        let sig = |v: f64| {
            let mut g = Graph::new(Mode::Train);
            let x = g.constant(t(&[2], &[v, 1.0]));
            g.relu(x).unwrap();
            g.kink_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }

    #[test]
    fn non_finite_values_are_numeric_errors() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(t(&[1], &[800.0]));
        assert!(matches!(g.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut g = Graph::new(Mode::Train);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }
}
