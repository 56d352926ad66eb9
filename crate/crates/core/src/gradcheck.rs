//! Finite-difference verification of tape gradients.

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, truncation error O(h⁴).
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on sampled coordinates per checked tensor.
    pub max_coords: usize,
    pub seed: u64,
    pub mode: Mode,
    pub stencil: Stencil,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Multiply `floor` by `max(1, |f|)`.
    pub scale_floor: bool,
}

impl Default for GradCheckOptions {
    /// Two-point central differences at `eps = 1e-4`, floor `1e-8`.
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords: 512,
            seed: 0,
            mode: Mode::Train,
            stencil: Stencil::Central,
            floor: 1e-8,
            scale_floor: false,
        }
    }
}

impl GradCheckOptions {
    /// Settings for deep compositions. Normalization layers make the loss
    /// strongly curved in weight space, so the two-point rule at `1e-4`
    /// carries truncation error near `1e-4` itself; the fourth-order rule at
    /// `1e-3` does not. Gradients that are structurally zero (a bias feeding
    /// a normalization) leave only roundoff of order `1e-16·Σ|terms| / eps`,
    /// which the loss-scaled floor absorbs.
    pub fn composite() -> Self {
        Self {
            eps: 1e-3,
            stencil: Stencil::FivePoint,
            floor: 1e-6,
            scale_floor: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates passed over because a probe straddled a kink.
    pub coords_skipped: usize,
    /// `(tensor label, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative discrepancy `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// [`rel_error_with_floor`] at the default floor `1e-8`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_with_floor(analytic, numeric, 1e-8)
}

/// Difference quotient around the current point; `None` when any probe
/// landed on a different smooth piece than `base_sig`.
fn difference<P>(mut probe: P, opts: &GradCheckOptions, base_sig: u64) -> Result<Option<f64>>
where
    P: FnMut(f64) -> Result<(f64, u64)>,
{
    let h = opts.eps;
    let (p1, s1) = probe(h)?;
    let (m1, s2) = probe(-h)?;
    match opts.stencil {
        Stencil::Central => Ok((s1 == base_sig && s2 == base_sig).then(|| (p1 - m1) / (2.0 * h))),
        Stencil::FivePoint => {
            let (p2, s3) = probe(2.0 * h)?;
            let (m2, s4) = probe(-2.0 * h)?;
            let same = [s1, s2, s3, s4].iter().all(|s| *s == base_sig);
            Ok(same.then(|| (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)))
        }
    }
}

fn shuffled(rng: &mut Prng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut v);
    v
}

/// Checks `f` with respect to each tensor in `inputs`.
///
/// Coordinates whose perturbation moves any ReLU or absolute-value argument
/// across zero are skipped and resampled: the function is not differentiable
/// inside that window, so a central difference says nothing about the tape.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_params(|g, _, xs| f(g, xs), &ParamStore::new(), inputs, opts)
}

/// Checks `f` with respect to `inputs` and every trainable parameter of `store`.
pub fn grad_check_with_params<F>(
    f: F,
    store: &ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |ps: &ParamStore, xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new(opts.mode);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, ps, &vars)?;
        Ok((g.value(loss).item()?, g.kink_signature()))
    };

    let mut g = Graph::new(opts.mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let base = g.value(loss).item()?;
    let base_sig = g.kink_signature();
    let floor = if opts.scale_floor { opts.floor * base.abs().max(1.0) } else { opts.floor };
    let grads = g.backward(loss)?;
    let (again, _) = eval(store, inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "grad_check: function is not deterministic ({base} vs {again})"
        )));
    }

    let mut rng = Prng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        worst: None,
    };
    let record = |label: &str, idx: usize, a: f64, n: f64, report: &mut GradCheckReport| {
        let e = rel_error_with_floor(a, n, floor);
        report.coords_checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((label.to_string(), idx, a, n));
        }
    };

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut xs = inputs.to_vec();
        let mut taken = 0;
        for idx in shuffled(&mut rng, inputs[k].numel()) {
            if taken == opts.max_coords {
                break;
            }
            let orig = xs[k].data()[idx];
            let numeric = difference(
                |d| {
                    xs[k].data_mut()[idx] = orig + d;
                    eval(store, &xs)
                },
                opts,
                base_sig,
            )?;
            xs[k].data_mut()[idx] = orig;
            let Some(numeric) = numeric else {
                report.coords_skipped += 1;
                continue;
            };
            taken += 1;
            record(&format!("input[{k}]"), idx, analytic.data()[idx], numeric, &mut report);
        }
    }

    let trainable: Vec<ParamId> = store.ids().filter(|id| store.get(*id).trainable).collect();
    let mut perturbed = store.clone();
    for id in trainable {
        let p = store.get(id);
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let mut taken = 0;
        for idx in shuffled(&mut rng, p.value.numel()) {
            if taken == opts.max_coords {
                break;
            }
            let orig = p.value.data()[idx];
            let numeric = difference(
                |d| {
                    perturbed.get_mut(id).value.data_mut()[idx] = orig + d;
                    eval(&perturbed, inputs)
                },
                opts,
                base_sig,
            )?;
            perturbed.get_mut(id).value.data_mut()[idx] = orig;
            let Some(numeric) = numeric else {
                report.coords_skipped += 1;
                continue;
            };
            taken += 1;
            record(&p.name, idx, analytic.data()[idx], numeric, &mut report);
        }
    }
    Ok(report)
}
