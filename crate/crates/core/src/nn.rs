//! Parameterized layers: each registers its weights in a [`ParamStore`]
//! under a hierarchical name and records its forward pass on a [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::kernels::PadMode;
use crate::error::Result;
use crate::params::{ParamId, ParamStore, StatsId};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding at stride 1.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut Prng,
    ) -> Result<Self> {
        Self::with_pad(store, name, c_in, c_out, k, stride, k / 2, bias, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_pad(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Prng,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = store.add_uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], fan_in, rng)?;
        let bias = if bias {
            Some(store.add_uniform(&format!("{name}.bias"), &[c_out], fan_in, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            pad_mode: PadMode::Zeros,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d_padded(x, w, b, self.stride, self.pad, self.pad_mode)
    }
}

/// Affine map on token sequences `[L, C_in] -> [L, C_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, bias: bool, rng: &mut Prng) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), &[c_in, c_out], c_in, rng)?;
        let bias = if bias {
            Some(store.add_uniform(&format!("{name}.bias"), &[c_out], c_in, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        let stats = store.add_stats(&format!("{name}.running"), channels)?;
        Ok(Self { gamma, beta, stats })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.batch_norm(x, gamma, beta, ps, self.stats)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Causal depthwise convolution along the token axis.
#[derive(Clone, Debug)]
pub struct CausalConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl CausalConv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut Prng) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), &[channels, k], k, rng)?;
        let bias = store.add_uniform(&format!("{name}.bias"), &[channels], k, rng)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.causal_dwconv1d(x, w, b)
    }
}

/// Convolution, batch norm, then an activation.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub act: crate::autodiff::Activation,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        act: crate::autodiff::Activation,
        rng: &mut Prng,
    ) -> Result<Self> {
        // the norm's shift makes a conv bias redundant
        let conv = Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, false, rng)?;
        let norm = BatchNorm::new(store, &format!("{name}.bn"), c_out)?;
        Ok(Self { conv, norm, act })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.norm.forward(g, ps, y)?;
        g.activation(self.act, y)
    }
}

impl Conv2d {
    /// Switches the border rule to edge replication.
    pub fn replicate(mut self) -> Self {
        self.pad_mode = PadMode::Replicate;
        self
    }
}

impl ConvNormAct {
    pub fn replicate(mut self) -> Self {
        self.conv = self.conv.replicate();
        self
    }
}
