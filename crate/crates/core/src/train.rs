//! Toy training loop, checkpoints and split evaluation.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::autodiff::{Graph, Mode};
use crate::config::KvMap;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::loss::{loss_parts, total_loss, ChangeMask, LossConfig, UNCHANGED};
use crate::metrics::{Confusion, F1Average, HeightSums, MetricReport};
use crate::model::{Model, ModelConfig, PreparedInput};
use crate::params::ParamStore;
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    /// Keeps encoder weights fixed.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 42,
            lr: 1e-3,
            momentum: 0.9,
            loss: LossConfig::default(),
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse("steps")? {
            self.steps = v;
        }
        if let Some(v) = kv.parse("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse("lr")? {
            self.lr = v;
        }
        if let Some(v) = kv.parse("momentum")? {
            self.momentum = v;
        }
        if let Some(v) = kv.list::<f64>("lambda")? {
            self.loss.lambda = v
                .try_into()
                .map_err(|v: Vec<f64>| Error::config(format!("lambda needs 4 values, got {}", v.len())))?;
        }
        if let Some(v) = kv.list::<f64>("class_weights")? {
            self.loss.class_weights = v;
        }
        if let Some(v) = kv.parse("freeze_encoder")? {
            self.freeze_encoder = v;
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub terms: [f64; 4],
    pub total: f64,
}

pub const CURVE_HEADER: &str = "step,wce,mse3d,grad,mse_dsm,total";

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.terms[0], r.terms[1], r.terms[2], r.terms[3], r.total
        ));
    }
    s
}

/// Trained network plus its loss curve.
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub curve: Vec<CurveRow>,
}

/// SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    fn new(lr: f64, momentum: f64, n: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![None; n],
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &crate::autodiff::Gradients) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.get(id).name)));
            }
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.numel()]);
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, vi) in store.get_mut(id).value.data_mut().iter_mut().zip(v.iter()) {
                *p -= self.lr * vi;
            }
        }
        Ok(())
    }
}

/// Sample order: a fresh deterministic shuffle per pass over the data.
pub fn sample_order(n: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut order = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while order.len() < steps {
        let mut idx: Vec<usize> = (0..n).collect();
        Prng::stream(seed, epoch).shuffle(&mut idx);
        order.extend(idx.into_iter().take(steps - order.len()));
        epoch += 1;
    }
    order
}

/// Trains from scratch on `train`. On a numeric failure the last good
/// parameters are written to `last_good` (when given) before the error is
/// returned.
pub fn train_toy(
    train: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    last_good: Option<&Path>,
    mut on_step: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    cfg.loss.validate()?;
    if cfg.loss.class_weights.len() != model_cfg.decoder.num_classes {
        return Err(Error::config(format!(
            "{} class weights for {} classes",
            cfg.loss.class_weights.len(),
            model_cfg.decoder.num_classes
        )));
    }
    let (model, mut store) = Model::init(model_cfg.clone(), cfg.seed)?;
    if cfg.freeze_encoder {
        store.set_trainable_prefix("encoder.", false);
    }
    let channels = model_cfg.encoder.in_channels;
    let prepared: Vec<PreparedInput> = train.iter().map(|s| s.input.prepare(channels)).collect::<Result<_>>()?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, store.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for (step, &i) in sample_order(train.len(), cfg.steps, cfg.seed).iter().enumerate() {
        let attempt = (|| -> Result<(CurveRow, Vec<crate::params::StatsUpdate>, crate::autodiff::Gradients)> {
            let mut g = Graph::new(Mode::Train);
            let pred = model.forward_prepared(&mut g, &store, &prepared[i])?;
            let parts = loss_parts(&mut g, &pred, &train[i].targets, &cfg.loss)?;
            let (total, values) = total_loss(&mut g, &parts, &cfg.loss)?;
            if !values.total.is_finite() {
                return Err(Error::Numeric(format!("total loss is {}", values.total)));
            }
            let grads = g.backward(total)?;
            let row = CurveRow {
                step,
                terms: values.terms,
                total: values.total,
            };
            Ok((row, g.take_stats_updates(), grads))
        })();
        let (row, updates, grads) = match attempt {
            Ok(v) => v,
            Err(e @ Error::Numeric(_)) => {
                if let Some(p) = last_good {
                    save_checkpoint(p, &model.config, &store)?;
                }
                return Err(Error::Numeric(format!("step {step}: {e}")));
            }
            Err(e) => return Err(e),
        };
        let snapshot = last_good.map(|_| store.clone());
        if let Err(e) = opt.step(&mut store, &grads) {
            if let (Some(p), Some(s)) = (last_good, snapshot) {
                save_checkpoint(p, &model.config, &s)?;
            }
            return Err(e);
        }
        store.apply_stats_updates(&updates);
        on_step(&row);
        curve.push(row);
    }
    Ok(TrainOutcome { model, store, curve })
}

// ----- checkpoints ---------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"DPGC";
const CKPT_VERSION: u8 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

/// Binary named-parameter file: the model config as `key=value` text, then
/// every parameter (name, shape, f64 data) and every running-statistics
/// entry (name, mean, var).
pub fn checkpoint_bytes(config: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    put_str(&mut out, &config.to_kv().to_text());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_str(&mut out, &p.name);
        out.push(p.value.ndim() as u8);
        p.value.shape().iter().for_each(|d| out.extend_from_slice(&(*d as u32).to_le_bytes()));
        put_f64s(&mut out, p.value.data());
    }
    out.extend_from_slice(&(store.all_stats().len() as u32).to_le_bytes());
    for s in store.all_stats() {
        put_str(&mut out, &s.name);
        out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
        put_f64s(&mut out, &s.mean);
        put_f64s(&mut out, &s.var);
    }
    out
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(config, store))?;
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Rebuilds the model from the embedded config and fills in every
/// parameter by name. `expected`, when given, must match that config.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Model, ParamStore)> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig::from_kv(&KvMap::parse_text(&r.string()?)?)?;
    if let Some(e) = expected {
        if *e != config {
            return Err(Error::Checkpoint("checkpoint was written for a different model config".into()));
        }
    }
    let (model, mut store) = Model::init(config, 0)?;
    let n = r.u32()?;
    if n != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {n} parameters, model has {}", store.len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f64s(numel)?;
        let p = store
            .by_name_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, model expects {:?}", p.value.shape())));
        }
        p.value = Tensor::new(&shape, data)?;
    }
    let ns = r.u32()?;
    if ns != store.all_stats().len() {
        return Err(Error::Checkpoint(format!("checkpoint has {ns} statistics entries")));
    }
    for _ in 0..ns {
        let name = r.string()?;
        let c = r.u32()?;
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        let s = store
            .stats_by_name_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown statistics {name}")))?;
        if s.mean.len() != c {
            return Err(Error::Checkpoint(format!("{name}: {c} channels, model expects {}", s.mean.len())));
        }
        s.mean = mean;
        s.var = var;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((model, store))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, ParamStore)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes, expected)
}

// ----- evaluation -----------------------------------------------------------

/// Per-tile predictions reduced to labels and heights.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePrediction {
    pub labels: Vec<usize>,
    pub height: Tensor,
}

/// Metrics plus the raw payloads needed for plots.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: MetricReport,
    /// `(gt, pred)` height change at every change-region pixel.
    pub scatter: Vec<(f64, f64)>,
    pub gt_heights: Vec<f64>,
    pub pred_heights: Vec<f64>,
}

pub fn argmax_labels(logits: &Tensor) -> Result<Vec<usize>> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let z = logits.data();
    Ok((0..n)
        .map(|p| {
            (0..k).fold(0, |best, c| if z[c * n + p] > z[best * n + p] { c } else { best })
        })
        .collect())
}

/// Normalization statistics used at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormStats {
    /// Per-tile statistics, as during training. Running statistics of the
    /// shared encoder average over three input modalities and match none.
    #[default]
    Instance,
    /// Stored running statistics.
    Running,
}

impl NormStats {
    pub fn mode(self) -> Mode {
        match self {
            Self::Instance => Mode::Train,
            Self::Running => Mode::Eval,
        }
    }
}

impl std::fmt::Display for NormStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Instance => "instance",
            Self::Running => "running",
        })
    }
}

impl std::str::FromStr for NormStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Self::Instance),
            "running" => Ok(Self::Running),
            _ => Err(Error::config(format!("norm stats must be instance or running, got {s:?}"))),
        }
    }
}

/// Forward pass without any parameter or statistics update.
pub fn predict(model: &Model, store: &ParamStore, sample: &Sample, norm: NormStats) -> Result<TilePrediction> {
    let mut g = Graph::new(norm.mode());
    let pred = model.forward(&mut g, store, &sample.input)?;
    Ok(TilePrediction {
        labels: argmax_labels(g.value(pred.logits_2d))?,
        height: g.value(pred.height_3d).clone(),
    })
}

/// Aggregates metrics over `samples` given one prediction per sample.
pub fn score_predictions(samples: &[Sample], preds: &[TilePrediction], num_classes: usize, f1: F1Average) -> Result<EvalOutput> {
    if samples.len() != preds.len() {
        return Err(Error::dim(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let mut confusion = Confusion::new(num_classes);
    let mut sums = HeightSums::default();
    let mut scatter = Vec::new();
    let mut gt_heights = Vec::new();
    let mut pred_heights = Vec::new();
    for (s, p) in samples.iter().zip(preds) {
        let t = &s.targets;
        let (_, h, w) = t.delta_h.dims3()?;
        let mask = ChangeMask::from_labels(&t.labels, h, w)?;
        confusion.add(&p.labels, &t.labels)?;
        sums.add(&p.height, &t.delta_h, &mask)?;
        for ((&m, &gv), &pv) in mask.mask.iter().zip(t.delta_h.data()).zip(p.height.data()) {
            if m {
                scatter.push((gv, pv));
            }
        }
        gt_heights.extend_from_slice(t.delta_h.data());
        pred_heights.extend_from_slice(p.height.data());
    }
    Ok(EvalOutput {
        report: MetricReport::new(confusion, &sums, f1, samples.len())?,
        scatter,
        gt_heights,
        pred_heights,
    })
}

pub fn evaluate(model: &Model, store: &ParamStore, samples: &[Sample], f1: F1Average, norm: NormStats) -> Result<EvalOutput> {
    let preds = samples.iter().map(|s| predict(model, store, s, norm)).collect::<Result<Vec<_>>>()?;
    score_predictions(samples, &preds, model.config.decoder.num_classes, f1)
}

/// The no-change baseline: every pixel unchanged, `Δh ≡ 0`.
pub fn zero_predictions(samples: &[Sample]) -> Vec<TilePrediction> {
    samples
        .iter()
        .map(|s| TilePrediction {
            labels: vec![UNCHANGED; s.targets.labels.len()],
            height: Tensor::zeros(s.targets.delta_h.shape()),
        })
        .collect()
}

/// Ground truth as prediction.
pub fn oracle_predictions(samples: &[Sample]) -> Vec<TilePrediction> {
    samples
        .iter()
        .map(|s| TilePrediction {
            labels: s.targets.labels.clone(),
            height: s.targets.delta_h.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_order_visits_everything_each_pass() {
        let o = sample_order(5, 12, 3);
        assert_eq!(o.len(), 12);
        let mut first: Vec<usize> = o[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(o, sample_order(5, 12, 3));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::new(&[2, 1, 2], vec![0.0, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![0, 0]);
    }

    #[test]
    fn curve_csv_layout() {
        let s = curve_to_csv(&[CurveRow {
            step: 0,
            terms: [1.0, 2.0, 0.5, 4.0],
            total: 7.1,
        }]);
        assert_eq!(s, "step,wce,mse3d,grad,mse_dsm,total\n0,1,2,0.5,4,7.1\n");
    }
}
