//! The four-term training objective and T2-DSM ground-truth derivation.

use crate::autodiff::{Graph, Var};
use crate::decoder::PredictionTriple;
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Label of the unchanged class.
pub const UNCHANGED: usize = 0;

pub const TERM_NAMES: [&str; 4] = ["wce", "mse3d", "grad", "mse_dsm"];

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// `[λ_wCE, λ_mse3d, λ_grad, λ_mseDsm]`.
    pub lambda: [f64; 4],
    pub class_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0, 1.0, 0.2, 1.0],
            class_weights: vec![0.05, 0.95, 0.95],
        }
    }
}

impl LossConfig {
    /// Default term weights; class weights 0.05 for unchanged and 0.95 for
    /// every changed class.
    pub fn for_classes(num_classes: usize) -> Self {
        let mut w = vec![0.95; num_classes];
        w[UNCHANGED] = 0.05;
        Self {
            class_weights: w,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and nonnegative: {:?}", self.lambda)));
        }
        if self.lambda.iter().all(|l| *l == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("class weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Pixels whose 2D label is not unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask {
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl ChangeMask {
    pub fn from_labels(labels: &[usize], height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!("{} labels for a {height}x{width} map", labels.len())));
        }
        Ok(Self {
            mask: labels.iter().map(|&l| l != UNCHANGED).collect(),
            height,
            width,
        })
    }

    /// `N`.
    pub fn total(&self) -> usize {
        self.mask.len()
    }

    /// `N_c`.
    pub fn changed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            mask: self.mask.iter().map(|m| !m).collect(),
            ..*self
        }
    }
}

/// Ground truth for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<usize>,
    /// `[1, H, W]` meters.
    pub delta_h: Tensor,
    /// `[1, H, W]` meters.
    pub dsm_t2: Tensor,
}

impl Targets {
    pub fn new(labels: Vec<usize>, dsm_t1: &Tensor, delta_h: Tensor) -> Result<Self> {
        let dsm_t2 = derive_dsm_gt(dsm_t1, &delta_h)?;
        Ok(Self { labels, delta_h, dsm_t2 })
    }
}

/// `dsm_t2 = dsm_t1 + delta_h`, elementwise.
pub fn derive_dsm_gt(dsm_t1: &Tensor, delta_h: &Tensor) -> Result<Tensor> {
    dsm_t1.zip_map(delta_h, |a, b| a + b)
}

/// The four unweighted loss terms as graph scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub wce: Var,
    pub mse3d: Var,
    pub grad: Var,
    pub mse_dsm: Var,
}

impl LossParts {
    pub fn as_array(&self) -> [Var; 4] {
        [self.wce, self.mse3d, self.grad, self.mse_dsm]
    }
}

/// Loss term values plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub terms: [f64; 4],
    pub total: f64,
}

pub fn loss_parts(g: &mut Graph, pred: &PredictionTriple, t: &Targets, cfg: &LossConfig) -> Result<LossParts> {
    same_shape(g.value(pred.height_3d), &t.delta_h)?;
    same_shape(g.value(pred.dsm_t2), &t.dsm_t2)?;
    let (_, h, w) = t.delta_h.dims3()?;
    let mask = ChangeMask::from_labels(&t.labels, h, w)?;
    let wce = g.weighted_ce(pred.logits_2d, &t.labels, &cfg.class_weights)?;
    let dh = g.constant(t.delta_h.clone());
    let mse3d = g.mse(pred.height_3d, dh)?;
    let grad = g.grad_loss(pred.height_3d, dh, &mask.mask)?;
    let dsm = g.constant(t.dsm_t2.clone());
    let mse_dsm = g.mse(pred.dsm_t2, dsm)?;
    Ok(LossParts { wce, mse3d, grad, mse_dsm })
}

/// Weighted sum of already evaluated terms.
pub fn combine_terms(terms: [f64; 4], cfg: &LossConfig) -> Result<f64> {
    for (v, name) in terms.iter().zip(TERM_NAMES) {
        if v.is_nan() {
            return Err(Error::Numeric(format!("loss term {name} is NaN")));
        }
    }
    Ok(terms.iter().zip(cfg.lambda).map(|(v, l)| l * v).sum())
}

/// `Σ λ_k · L_k` on the graph. Terms with `λ_k = 0` are left out of the
/// sum, so they contribute no gradient at all.
pub fn total_loss(g: &mut Graph, parts: &LossParts, cfg: &LossConfig) -> Result<(Var, LossValues)> {
    cfg.validate()?;
    let mut terms = [0.0; 4];
    for (k, v) in parts.as_array().iter().enumerate() {
        terms[k] = g.value(*v).item()?;
    }
    let total_value = combine_terms(terms, cfg)?;
    let mut total: Option<Var> = None;
    for (v, l) in parts.as_array().into_iter().zip(cfg.lambda) {
        if l == 0.0 {
            continue;
        }
        let s = g.scale(v, l)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("all loss weights are zero"))?;
    Ok((
        total,
        LossValues {
            terms,
            total: total_value,
        },
    ))
}
