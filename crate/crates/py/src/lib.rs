//! Python bindings. Tensors travel as flat `data` lists with a `shape`; label
//! rasters as nested lists of ints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fdnet_core::bands;
use fdnet_core::checkpoint::{self, CheckpointMeta};
use fdnet_core::config::parse_json;
use fdnet_core::data::{Dataset as CoreDataset, SyntheticSpec, DEFAULT_IGNORE};
use fdnet_core::gradcheck;
use fdnet_core::graph::Graph;
use fdnet_core::layers::Mode;
use fdnet_core::loss::{self, LossConfig, WeightMode};
use fdnet_core::network::{self as net, NetworkSpec as CoreSpec, Wiring};
use fdnet_core::raster::LabelMap;
use fdnet_core::train::{self as train, InferenceOptions, TrainConfig, TrainHooks};

create_exception!(fdnet, FdnetError, PyException);

fn err(e: fdnet_core::Error) -> PyErr {
    FdnetError::new_err(e.to_string())
}

fn labels_from(rows: Vec<Vec<i64>>) -> PyResult<LabelMap> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(FdnetError::new_err("label rows differ in length"));
    }
    let mut data = Vec::with_capacity(h * w);
    for v in rows.into_iter().flatten() {
        let v = u8::try_from(v).map_err(|_| FdnetError::new_err(format!("label {} outside 0..=255", v)))?;
        data.push(v);
    }
    LabelMap::new(h, w, data).map_err(err)
}

fn labels_to(l: &LabelMap) -> Vec<Vec<u16>> {
    l.data.chunks(l.width).map(|r| r.iter().map(|&v| v as u16).collect()).collect()
}

fn wiring_from(name: &str) -> PyResult<Wiring> {
    match name {
        "none" => Ok(Wiring::None),
        "skip" => Ok(Wiring::Skip),
        "dense" => Ok(Wiring::Dense),
        _ => Err(FdnetError::new_err(format!("unknown wiring `{}`", name))),
    }
}

#[pyclass(module = "fdnet", from_py_object)]
#[derive(Clone)]
pub struct Tensor {
    inner: fdnet_core::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor { inner: fdnet_core::Tensor::new(shape, data).map_err(err)? })
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f64) -> Self {
        Tensor { inner: fdnet_core::Tensor::full(&shape, value) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &Tensor) -> PyResult<f64> {
        if self.inner.shape() != other.inner.shape() {
            return Err(FdnetError::new_err("shape mismatch"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(module = "fdnet", from_py_object)]
#[derive(Clone)]
pub struct NetworkSpec {
    inner: CoreSpec,
}

#[pymethods]
impl NetworkSpec {
    /// Toy variant with the given stride (16 or 32) and wiring (`none`, `skip`, `dense`).
    #[staticmethod]
    #[pyo3(signature = (stride=16, wiring="dense", class_count=4))]
    fn toy(stride: usize, wiring: &str, class_count: usize) -> PyResult<Self> {
        let mut inner = CoreSpec::toy().with_stride(stride).with_wiring(wiring_from(wiring)?);
        inner.class_count = class_count;
        inner.validate().map_err(err)?;
        Ok(NetworkSpec { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreSpec = parse_json(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(NetworkSpec { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("spec serializes")
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    #[getter]
    fn encoder_stride(&self) -> usize {
        self.inner.encoder_stride
    }

    #[getter]
    fn wiring(&self) -> String {
        self.inner.wiring.to_string()
    }

    fn block_scales(&self) -> Vec<usize> {
        self.inner.block_scales().to_vec()
    }

    fn required_multiple(&self) -> usize {
        self.inner.required_multiple()
    }
}

#[pyclass(module = "fdnet")]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (seed=0, samples=8, canvas=64, class_count=4, size_range=None))]
    fn synthetic(seed: u64, samples: usize, canvas: usize, class_count: usize, size_range: Option<[usize; 2]>) -> PyResult<Self> {
        let defaults = SyntheticSpec::default();
        let spec = SyntheticSpec {
            seed,
            samples,
            canvas,
            class_count,
            size_range: size_range.unwrap_or(defaults.size_range),
            ..defaults
        };
        Ok(Dataset { inner: CoreDataset::synthetic(&spec).map_err(err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Dataset { inner: CoreDataset::load(dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(dir, None).map_err(err)
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    #[getter]
    fn channel_means(&self) -> Vec<f64> {
        self.inner.channel_means.clone()
    }

    /// `(id, image, labels)` of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(String, Tensor, Vec<Vec<u16>>)> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| FdnetError::new_err(format!("sample {} out of range", i)))?;
        Ok((s.id.clone(), Tensor { inner: s.image.clone() }, labels_to(&s.labels)))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "fdnet")]
pub struct Network {
    inner: net::Network,
    channel_means: Vec<f64>,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (spec, seed=0))]
    fn new(spec: &NetworkSpec, seed: u64) -> PyResult<Self> {
        Ok(Network {
            inner: net::build_fdnet(&spec.inner, seed).map_err(err)?,
            channel_means: vec![0.0; spec.inner.in_channels],
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = checkpoint::load_checkpoint(path).map_err(err)?;
        Ok(Network { inner, channel_means: meta.channel_means })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointMeta {
            iteration: 0,
            channel_means: self.channel_means.clone(),
            ignore: DEFAULT_IGNORE,
        };
        checkpoint::save_checkpoint(&self.inner, &meta, path).map_err(err)
    }

    #[getter]
    fn spec(&self) -> NetworkSpec {
        NetworkSpec { inner: self.inner.spec.clone() }
    }

    fn count_parameters(&self) -> usize {
        net::count_parameters(&self.inner)
    }

    /// Aggregation edges as `(source, stage, direct, transform, width)` tuples.
    fn connectivity(&self) -> Vec<(String, usize, bool, String, usize)> {
        net::connectivity_report(&self.inner)
            .edges
            .iter()
            .map(|e| (e.source.to_string(), e.stage, e.direct, e.transform.to_string(), e.width))
            .collect()
    }

    /// Named outputs (`logits`, `probs`, `stage{i}_logits`) of one pass.
    #[pyo3(signature = (image, train=false))]
    fn forward(&self, image: &Tensor, train: bool) -> PyResult<BTreeMap<String, Tensor>> {
        let mut inputs = BTreeMap::new();
        inputs.insert("image".to_string(), image.inner.clone());
        let mode = if train { Mode::Train } else { Mode::Eval };
        let out = self.inner.forward_eval(&inputs, mode).map_err(err)?;
        Ok(out.into_iter().map(|(k, v)| (k, Tensor { inner: v })).collect())
    }

    /// Multi-scale, optionally flipped prediction: `(labels, probs)`.
    #[pyo3(signature = (image, scales=vec![1.0], flip=false))]
    fn predict(&self, image: &Tensor, scales: Vec<f64>, flip: bool) -> PyResult<(Vec<Vec<u16>>, Tensor)> {
        let opts = InferenceOptions {
            scales,
            flip,
            channel_means: self.channel_means.clone(),
            jobs: 1,
        };
        let p = train::predict_multiscale(&self.inner, &image.inner, &opts).map_err(err)?;
        Ok((labels_to(&p.labels), Tensor { inner: p.probs }))
    }

    /// Trains in place and returns `(iter, lr, loss)` rows. `boundary` selects
    /// the boundary-aware loss with its default settings instead of plain
    /// cross entropy; `config` is an optional JSON training section.
    #[pyo3(signature = (dataset, config=None, boundary=false))]
    fn train(&mut self, py: Python<'_>, dataset: &Dataset, config: Option<&str>, boundary: bool) -> PyResult<Vec<(usize, f64, f64)>> {
        let cfg: TrainConfig = match config {
            Some(text) => parse_json(text).map_err(err)?,
            None => TrainConfig::default(),
        };
        let classes = self.inner.spec.class_count;
        let loss_cfg = if boundary {
            LossConfig {
                alpha: vec![8.0, 6.0, 4.0, 2.0, 1.0],
                kernels: vec![2, 4, 6, 8],
                mode: WeightMode::Exp,
                lambda: 0.75,
                class_count: classes,
            }
        } else {
            LossConfig::cross_entropy(classes)
        };
        let data = &dataset.inner;
        let net = &mut self.inner;
        let outcome = py
            .detach(|| train::train(net, data, &cfg, &loss_cfg, TrainHooks::default()))
            .map_err(err)?;
        self.channel_means = dataset.inner.channel_means.clone();
        Ok(outcome.log.iter().map(|r| (r.iter, r.lr, r.loss)).collect())
    }

    /// Training-set style mIoU of single-scale predictions on `dataset`.
    fn evaluate(&self, dataset: &Dataset) -> PyResult<f64> {
        train::evaluate_miou(&self.inner, &dataset.inner).map_err(err)
    }
}

/// Band index per pixel (`1..=K`, `0` for ignored pixels).
#[pyfunction]
#[pyo3(signature = (labels, kernels, ignore=255))]
fn band_partition(labels: Vec<Vec<i64>>, kernels: Vec<usize>, ignore: u8) -> PyResult<Vec<Vec<u16>>> {
    let l = labels_from(labels)?;
    let b = bands::band_partition(&l, &kernels, ignore).map_err(err)?;
    Ok(b.raw().chunks(b.width).map(<[u16]>::to_vec).collect())
}

/// Boundary-aware loss of `probs` (`N x C x H x W`, already softmaxed) for one
/// label raster per batch item.
#[pyfunction]
#[pyo3(signature = (probs, labels, alpha, kernels, mode="exp", lam=0.75, ignore=255))]
fn boundary_aware_loss(
    probs: &Tensor,
    labels: Vec<Vec<Vec<i64>>>,
    alpha: Vec<f64>,
    kernels: Vec<usize>,
    mode: &str,
    lam: f64,
    ignore: u8,
) -> PyResult<f64> {
    let mode = match mode {
        "poly" => WeightMode::Poly,
        "exp" => WeightMode::Exp,
        other => return Err(FdnetError::new_err(format!("unknown mode `{}`", other))),
    };
    let class_count = probs.inner.shape().get(1).copied().unwrap_or(0);
    let cfg = LossConfig { alpha, kernels, mode, lambda: lam, class_count };
    cfg.validate().map_err(err)?;
    let gt = labels.into_iter().map(labels_from).collect::<PyResult<Vec<_>>>()?;
    let bands = gt
        .iter()
        .map(|l| bands::band_partition(l, &cfg.kernels, ignore))
        .collect::<fdnet_core::Result<Vec<_>>>()
        .map_err(err)?;
    let mut g = Graph::new();
    let p = g.try_input(probs.inner.clone()).map_err(err)?;
    let l = loss::boundary_aware_loss(&mut g, p, &gt, &bands, &cfg, ignore).map_err(err)?;
    Ok(g.value(l).data()[0])
}

#[pyfunction]
fn gradcheck_ops() -> Vec<&'static str> {
    gradcheck::OPS.to_vec()
}

/// `(max_rel_error, coordinates, passed)` for one operation.
#[pyfunction]
#[pyo3(signature = (op, seed=0))]
fn gradcheck_op(py: Python<'_>, op: &str, seed: u64) -> PyResult<(f64, usize, bool)> {
    let r = py.detach(|| gradcheck::run_check(op, seed)).map_err(err)?;
    Ok((r.max_rel_error, r.coordinates, r.passed()))
}

/// Pixel accuracy, mean accuracy, per-class IoU and mIoU of one prediction.
#[pyfunction]
#[pyo3(signature = (pred, gt, class_count, ignore=255))]
fn compute_metrics<'py>(
    py: Python<'py>,
    pred: Vec<Vec<i64>>,
    gt: Vec<Vec<i64>>,
    class_count: usize,
    ignore: u8,
) -> PyResult<Bound<'py, PyDict>> {
    let r = train::compute_metrics(&labels_from(pred)?, &labels_from(gt)?, class_count, ignore).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("pixel_accuracy", r.pixel_accuracy)?;
    d.set_item("mean_accuracy", r.mean_accuracy)?;
    d.set_item("per_class_iou", r.per_class_iou)?;
    d.set_item("mean_iou", r.mean_iou)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, band_width, class_count, ignore=255))]
fn trimap_miou(pred: Vec<Vec<i64>>, gt: Vec<Vec<i64>>, band_width: usize, class_count: usize, ignore: u8) -> PyResult<Option<f64>> {
    train::trimap_miou(&labels_from(pred)?, &labels_from(gt)?, band_width, class_count, ignore).map_err(err)
}

#[pyfunction]
fn poly_lr(iter: usize, base_lr: f64, max_iter: usize, power: f64) -> f64 {
    train::poly_lr(iter, base_lr, max_iter, power)
}

#[pymodule]
fn fdnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FdnetError", m.py().get_type::<FdnetError>())?;
    m.add_class::<Tensor>()?;
    m.add_class::<NetworkSpec>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(band_partition, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_aware_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_ops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_op, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(trimap_miou, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    Ok(())
}
