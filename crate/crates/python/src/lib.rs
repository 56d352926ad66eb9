//! Python bindings. Tensors cross the boundary as a shape plus a flat
//! row-major list of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dpgcd::config::KvMap;
use dpgcd::dataset::{load_split, write_synthetic, Manifest, PriorFallback, Split};
use dpgcd::loss::{ChangeMask, LossConfig};
use dpgcd::metrics::{class_iou_f1, height_metrics, F1Average};
use dpgcd::model::{Model, ModelConfig, ModelInput};
use dpgcd::report::emit_report;
use dpgcd::synthetic::{gen_synthetic, SyntheticSceneConfig};
use dpgcd::train::{evaluate, load_checkpoint, predict, save_checkpoint, train_toy, NormStats, TrainConfig};
use dpgcd::{Error, Graph, Mode};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dpgcd::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense f64 tensor.
#[pyclass(name = "Tensor", module = "dpgcd_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: dpgcd::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: dpgcd::Tensor::new(&shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: dpgcd::Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: dpgcd::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// Row-wise softmax over the last axis.
#[pyfunction]
fn softmax(x: &PyTensor) -> PyResult<PyTensor> {
    let mut g = Graph::new(Mode::Eval);
    let v = g.constant(x.inner.clone());
    let y = g.softmax(v).py()?;
    Ok(wrap(g.value(y).clone()))
}

/// Selective scan with `x, delta: [L, D]`, `a: [D, N]`, `b, c: [L, N]`.
#[pyfunction]
fn selective_scan(x: &PyTensor, delta: &PyTensor, a: &PyTensor, b: &PyTensor, c: &PyTensor) -> PyResult<PyTensor> {
    let mut g = Graph::new(Mode::Eval);
    let [x, delta, a, b, c] = [x, delta, a, b, c].map(|t| g.constant(t.inner.clone()));
    let y = g.scan(x, delta, a, b, c).py()?;
    Ok(wrap(g.value(y).clone()))
}

/// Per-class `(iou, f1, absent)` of two label maps.
#[pyfunction]
fn class_scores(pred: Vec<usize>, gt: Vec<usize>, num_classes: usize) -> PyResult<Vec<(f64, f64, bool)>> {
    Ok(class_iou_f1(&pred, &gt, num_classes)
        .py()?
        .into_iter()
        .map(|s| (s.iou, s.f1, s.absent))
        .collect())
}

/// Height-change errors; the change-region terms use `labels != 0`.
#[pyfunction]
fn height_errors(pred: &PyTensor, gt: &PyTensor, labels: Vec<usize>) -> PyResult<std::collections::BTreeMap<String, Option<f64>>> {
    let (_, h, w) = gt.inner.dims3().py()?;
    let mask = ChangeMask::from_labels(&labels, h, w).py()?;
    let m = height_metrics(&pred.inner, &gt.inner, &mask).py()?;
    Ok([
        ("mae", Some(m.mae)),
        ("rmse", Some(m.rmse)),
        ("crmse", m.crmse),
        ("crel", m.crel),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect())
}

fn kv(map: Option<std::collections::BTreeMap<String, String>>) -> KvMap {
    KvMap(map.unwrap_or_default())
}

/// Generated tiles as dictionaries of tensors and label lists.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn synthetic_tiles(py: Python<'_>, config: Option<std::collections::BTreeMap<String, String>>) -> PyResult<Vec<Py<PyAny>>> {
    let mut cfg = SyntheticSceneConfig::default();
    cfg.apply_kv(&kv(config)).py()?;
    let tiles = gen_synthetic(&cfg).py()?;
    tiles
        .into_iter()
        .map(|t| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("index", t.index)?;
            d.set_item("dsm_t1", wrap(t.dsm_t1))?;
            d.set_item("dsm_t2", wrap(t.dsm_t2))?;
            d.set_item("delta_h", wrap(t.delta_h))?;
            d.set_item("img_t2", wrap(t.img_t2))?;
            d.set_item("depth_prior", wrap(t.depth_prior))?;
            d.set_item("labels", t.labels)?;
            Ok(d.into_any().unbind())
        })
        .collect()
}

/// Writes a synthetic scene set and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn write_synthetic_set(out_dir: PathBuf, config: Option<std::collections::BTreeMap<String, String>>) -> PyResult<PathBuf> {
    let mut cfg = SyntheticSceneConfig::default();
    cfg.apply_kv(&kv(config)).py()?;
    write_synthetic(&cfg, &out_dir).py()?;
    Ok(out_dir.join("manifest.tsv"))
}

/// The change detection network with its parameters.
#[pyclass(name = "Model", module = "dpgcd_py")]
pub struct PyModel {
    model: Model,
    store: dpgcd::ParamStore,
}

#[pymethods]
impl PyModel {
    /// `config` holds the same `key=value` entries as a config file.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<std::collections::BTreeMap<String, String>>, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::from_kv(&kv(config)).py()?;
        let (model, store) = Model::init(cfg, seed).py()?;
        Ok(Self { model, store })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, store) = load_checkpoint(&path, None).py()?;
        Ok(Self { model, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.model.config, &self.store).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn config(&self) -> std::collections::BTreeMap<String, String> {
        self.model.config.to_kv().0
    }

    /// Returns `(labels, height_change)` for one tile.
    #[pyo3(signature = (dsm_t1, img_t2, depth_prior, norm_stats="instance"))]
    fn predict(&self, dsm_t1: &PyTensor, img_t2: &PyTensor, depth_prior: &PyTensor, norm_stats: &str) -> PyResult<(Vec<usize>, PyTensor)> {
        let norm: NormStats = norm_stats.parse().py()?;
        let sample = dpgcd::dataset::Sample {
            id: String::new(),
            input: ModelInput {
                dsm_t1: dsm_t1.inner.clone(),
                img_t2: img_t2.inner.clone(),
                depth_prior: depth_prior.inner.clone(),
            },
            targets: dpgcd::loss::Targets::new(
                Vec::new(),
                &dsm_t1.inner,
                dpgcd::Tensor::zeros(dsm_t1.inner.shape()),
            )
            .py()?,
        };
        let p = predict(&self.model, &self.store, &sample, norm).py()?;
        Ok((p.labels, wrap(p.height)))
    }

    /// Scores the model on a manifest split, writes the report files into
    /// `out_dir` and returns the metrics table.
    #[pyo3(signature = (manifest, out_dir, split="test", norm_stats="instance"))]
    fn evaluate(&self, manifest: PathBuf, out_dir: PathBuf, split: &str, norm_stats: &str) -> PyResult<String> {
        let split: Split = split.parse().py()?;
        let norm: NormStats = norm_stats.parse().py()?;
        let m = Manifest::load(&manifest).py()?;
        let samples = load_split(&m, split, self.model.config.decoder.num_classes, PriorFallback::None).py()?;
        let ev = evaluate(&self.model, &self.store, &samples, F1Average::AllClasses, norm).py()?;
        emit_report(&ev, &out_dir).py()?;
        Ok(ev.report.to_text())
    }
}

/// Trains on the train split of `manifest`; returns the model and the
/// per-step total loss.
#[pyfunction]
#[pyo3(signature = (manifest, steps=2000, seed=42, model_config=None))]
fn train(
    manifest: PathBuf,
    steps: usize,
    seed: u64,
    model_config: Option<std::collections::BTreeMap<String, String>>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let mc = ModelConfig::from_kv(&kv(model_config)).py()?;
    let tc = TrainConfig {
        steps,
        seed,
        loss: LossConfig::for_classes(mc.decoder.num_classes),
        ..TrainConfig::default()
    };
    let m = Manifest::load(&manifest).py()?;
    let samples = load_split(&m, Split::Train, mc.decoder.num_classes, PriorFallback::None).py()?;
    let out = train_toy(&samples, &mc, &tc, None, |_| {}).py()?;
    let totals = out.curve.iter().map(|r| r.total).collect();
    Ok((
        PyModel {
            model: out.model,
            store: out.store,
        },
        totals,
    ))
}

/// Finite-difference gradient checks; one `(module, case, seed,
/// max_rel_error)` row per run.
#[pyfunction]
#[pyo3(signature = (module=None, seeds=3))]
fn gradcheck(module: Option<&str>, seeds: u64) -> PyResult<Vec<(String, String, u64, f64)>> {
    Ok(dpgcd::checks::run_checks(module, 0..seeds)
        .py()?
        .into_iter()
        .map(|o| (o.module.to_string(), o.name.to_string(), o.seed, o.report.max_rel_error))
        .collect())
}

#[pymodule]
fn dpgcd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(class_scores, m)?)?;
    m.add_function(wrap_pyfunction!(height_errors, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_tiles, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_set, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("TOLERANCE", dpgcd::checks::TOLERANCE)?;
    Ok(())
}
