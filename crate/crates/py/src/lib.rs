//! Python bindings: fold construction, metrics, voting, the matching kernels,
//! dataset synthesis, training and evaluation of saved pipelines.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptseg::check::{run_checks, CheckLevel, CheckOptions};
use promptseg::cli::{cmd_train, TrainArgs};
use promptseg::data::{make_folds as core_make_folds, Dataset, DatasetMeta, Mask, SynthConfig};
use promptseg::eval::{evaluate_fold, EvalProtocol, PipelineModel};
use promptseg::matching::cp4d::{cp4d_conv, Cp4dKernel, Cp4dStride};
use promptseg::matching::correlation::build_hypercorrelation;
use promptseg::model::Ablation;
use promptseg::train::Checkpoint;

fn err(e: promptseg::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn candle_err(e: candle_core::Error) -> PyErr {
    err(e.into())
}

fn json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mask_from_rows(rows: Vec<Vec<u8>>) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    let data: Vec<u8> = rows.into_iter().flatten().map(|v| u8::from(v != 0)).collect();
    Ok(Mask { height: h, width: w, data })
}

fn mask_to_rows(m: &Mask) -> Vec<Vec<u32>> {
    m.data.chunks(m.width.max(1)).map(|r| r.iter().map(|&v| u32::from(v)).collect()).collect()
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> PyResult<Tensor> {
    Tensor::from_vec(data, shape, &Device::Cpu).map_err(candle_err)
}

fn flatten(t: &Tensor) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let v = t.flatten_all().and_then(|f| f.to_vec1::<f64>()).map_err(candle_err)?;
    Ok((v, t.dims().to_vec()))
}

/// `(train_classes, test_classes)` of fold `fold` over the given class ids.
#[pyfunction]
#[pyo3(signature = (class_ids, fold=0))]
fn make_folds(class_ids: Vec<u32>, fold: usize) -> PyResult<(Vec<u32>, Vec<u32>)> {
    let meta = DatasetMeta {
        name: "python".into(),
        root: PathBuf::new(),
        resolution: None,
        class_ids,
        image_index: Default::default(),
    };
    let f = core_make_folds(&meta, fold).map_err(err)?;
    Ok((f.train_classes.into_iter().collect(), f.test_classes.into_iter().collect()))
}

/// Foreground IoU of two binary masks given as lists of rows.
#[pyfunction]
fn iou(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    promptseg::eval::iou(&mask_from_rows(pred)?, &mask_from_rows(gt)?).map_err(err)
}

/// Pixel-wise vote over K binary masks: a pixel is kept when its vote
/// fraction exceeds `tau`.
#[pyfunction]
#[pyo3(signature = (masks, tau=0.5))]
fn vote(masks: Vec<Vec<Vec<u8>>>, tau: f64) -> PyResult<Vec<Vec<u32>>> {
    let preds = masks.into_iter().map(mask_from_rows).collect::<PyResult<Vec<_>>>()?;
    Ok(mask_to_rows(&promptseg::eval::vote(&preds, tau).map_err(err)?))
}

/// Clamped cosine correlation of flat `(B, C, H, W)` feature maps. Returns the
/// flat `(B, Hq, Wq, Hs, Ws)` volume and its shape.
#[pyfunction]
#[pyo3(signature = (f_q, q_shape, f_s, s_shape, support_mask=None))]
fn hypercorrelation(
    f_q: Vec<f64>,
    q_shape: [usize; 4],
    f_s: Vec<f64>,
    s_shape: [usize; 4],
    support_mask: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let q = tensor(f_q, &q_shape)?;
    let s = tensor(f_s, &s_shape)?;
    let m = support_mask
        .map(|m| tensor(m, &[s_shape[0], s_shape[2], s_shape[3]]))
        .transpose()?;
    flatten(&build_hypercorrelation(&q, &s, m.as_ref()).map_err(err)?)
}

/// Center-pivot 4D convolution of a flat `(B, C, Hq, Wq, Hs, Ws)` volume with
/// flat `(O, C, k, k)` query and support kernels.
#[pyfunction]
#[pyo3(signature = (x, x_shape, k_q, k_s, kernel_shape, bias=None, stride=(1, 1)))]
fn cp4d(
    x: Vec<f64>,
    x_shape: [usize; 6],
    k_q: Vec<f64>,
    k_s: Vec<f64>,
    kernel_shape: [usize; 4],
    bias: Option<Vec<f64>>,
    stride: (usize, usize),
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let kernel = Cp4dKernel {
        k_q: tensor(k_q, &kernel_shape)?,
        k_s: tensor(k_s, &kernel_shape)?,
        bias: bias.map(|b| tensor(b, &[kernel_shape[0]])).transpose()?,
    };
    let stride = Cp4dStride { query: stride.0, support: stride.1 };
    flatten(&cp4d_conv(&tensor(x, &x_shape)?, &kernel, stride).map_err(err)?)
}

/// Renders the synthetic shapes dataset under `out`; returns its class names by id.
#[pyfunction]
#[pyo3(signature = (out, seed=0, size=128, per_class=50))]
fn synth(out: PathBuf, seed: u64, size: usize, per_class: usize) -> PyResult<Vec<(u32, String)>> {
    let cfg = SynthConfig {
        image_size: size,
        per_class,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = promptseg::data::gen_synthetic_dataset(&cfg, out, &mut rng).map_err(err)?;
    data.write().map_err(err)?;
    Ok(data.classes.values().map(|r| (r.class_id, r.class_name.clone())).collect())
}

/// Runs the numerical self-checks; returns a list of result dicts.
#[pyfunction]
#[pyo3(signature = (level="quick", seed=0))]
fn check<'py>(py: Python<'py>, level: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let level: CheckLevel = level.parse().map_err(err)?;
    let report = run_checks(&CheckOptions { level, fault: None, seed }).map_err(err)?;
    json(py, &report.results)
}

/// Trains from a TOML run config; returns the process-style exit code.
#[pyfunction]
#[pyo3(signature = (config, seed, fold=0, out=None, ablation=None, epochs=None, steps_per_epoch=None))]
fn train(
    config: PathBuf,
    seed: u64,
    fold: usize,
    out: Option<PathBuf>,
    ablation: Option<&str>,
    epochs: Option<usize>,
    steps_per_epoch: Option<usize>,
) -> PyResult<u8> {
    let ablation = ablation.map(str::parse::<Ablation>).transpose().map_err(err)?;
    let args = TrainArgs {
        config,
        fold,
        seed,
        ablation,
        out,
        resume: None,
        epochs,
        steps_per_epoch,
    };
    cmd_train(&args).map_err(err)
}

/// A trained pipeline loaded from a checkpoint.
#[pyclass(unsendable)]
struct Pipeline {
    inner: promptseg::model::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { inner: ckpt.to_pipeline().map_err(err)? })
    }

    /// SHA-256 over every parameter tensor.
    fn checksum(&self) -> PyResult<String> {
        self.inner.store().checksum().map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.store().num_scalars()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, self.inner.config())
    }

    /// Episodic evaluation on the test classes of `fold`; returns the report
    /// as a dict.
    #[pyo3(signature = (data_root, fold=0, k=1, episodes=100, seeds=1, base_seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data_root: PathBuf,
        fold: usize,
        k: usize,
        episodes: usize,
        seeds: usize,
        base_seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let dataset = Dataset::open(&data_root, None, self.inner.config().image_size).map_err(err)?;
        let fold = core_make_folds(&dataset.meta, fold).map_err(err)?;
        let protocol = EvalProtocol {
            episodes,
            seeds,
            k,
            base_seed,
            ..EvalProtocol::default()
        };
        let mut model = PipelineModel::new(&self.inner);
        let mut report = evaluate_fold(&mut model, &dataset, &fold, &protocol, serde_json::Value::Null).map_err(err)?;
        report.sem_emission_rate = model.sem_emission_rate();
        json(py, &report)
    }
}

#[pymodule(name = "promptseg")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(vote, m)?)?;
    m.add_function(wrap_pyfunction!(hypercorrelation, m)?)?;
    m.add_function(wrap_pyfunction!(cp4d, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
