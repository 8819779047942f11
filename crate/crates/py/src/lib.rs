//! Python bindings: backbones, adapters, tensors, and the experiment
//! harness. Structured values cross the boundary as plain dicts and lists.

use dept_core::bench;
use dept_core::config::{self, ExperimentConfig};
use dept_core::harness;
use dept_core::peft::{InitOptions, PromptParams};
use dept_core::tasks::Example;
use dept_core::{BackboneConfig, Checkpoint, DeptError, DeptParams, PeftParams, PeftVariant, TokenBatch};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

fn err(e: DeptError) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<Value> {
    match obj {
        None => Ok(Value::Object(Default::default())),
        Some(o) => {
            let text: String = py.import("json")?.call_method1("dumps", (o,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
        }
    }
}

fn experiment(py: Python<'_>, cfg: Option<&Bound<'_, PyAny>>) -> PyResult<ExperimentConfig> {
    config::resolve(from_py(py, cfg)?, &[]).map_err(err)
}

fn batch(seqs: Vec<Vec<usize>>) -> PyResult<TokenBatch> {
    TokenBatch::new(&seqs).map_err(err)
}

fn rows(values: Vec<f32>, width: usize) -> Vec<Vec<f32>> {
    values.chunks(width).map(<[f32]>::to_vec).collect()
}

/// 64-bit tensor with reverse-mode gradients.
#[pyclass(unsendable, name = "Tensor")]
struct PyTensor {
    inner: dept_core::Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (values, shape, requires_grad = false))]
    fn new(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let inner = if requires_grad {
            dept_core::Tensor::param(values, &shape)
        } else {
            dept_core::Tensor::new(values, &shape)
        };
        Ok(PyTensor { inner: inner.map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.matmul(&other.inner).map_err(err)? })
    }

    fn add(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.add(&other.inner).map_err(err)? })
    }

    fn mul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.mul(&other.inner).map_err(err)? })
    }

    fn softmax(&self) -> PyTensor {
        PyTensor { inner: self.inner.softmax() }
    }

    fn sum(&self) -> PyTensor {
        PyTensor { inner: self.inner.sum() }
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(unsendable, name = "Backbone")]
struct PyBackbone {
    inner: dept_core::Backbone,
}

#[pymethods]
impl PyBackbone {
    /// Randomly initialised, frozen backbone. `config` is a backbone section
    /// dict; missing keys take their defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let mut value = serde_json::to_value(BackboneConfig::default()).expect("serialisable");
        if let (Value::Object(base), Value::Object(given)) = (&mut value, from_py(py, config)?) {
            base.extend(given);
        }
        let cfg: BackboneConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let mut inner = dept_core::Backbone::init(cfg, seed).map_err(err)?;
        inner.freeze();
        Ok(PyBackbone { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let mut inner = dept_core::Backbone::load(path).map_err(err)?;
        inner.freeze();
        Ok(PyBackbone { inner })
    }

    /// Pretrain on the source mixture of an experiment configuration;
    /// returns the backbone and the pretraining report.
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn pretrain<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let cfg = experiment(py, config)?;
        let (inner, report) = harness::pretrain_backbone(&cfg).map_err(err)?;
        Ok((PyBackbone { inner }, to_py(py, &report)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn param_count(&self) -> usize {
        self.inner.count_params().total()
    }

    /// Next-token logits at the last token of each sequence, `[B][V]`.
    fn logits(&self, seqs: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
        let b = batch(seqs)?;
        let all = self.inner.forward_ids(&b).map_err(err)?;
        let (n, v) = (b.seq_len, self.inner.config().vocab_size);
        let values = all.to_vec();
        Ok(b.lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| values[(i * n + len - 1) * v..(i * n + len) * v].to_vec())
            .collect())
    }
}

#[pyclass(unsendable, name = "Adapter")]
struct PyAdapter {
    inner: PeftParams,
}

#[pymethods]
impl PyAdapter {
    /// Vanilla soft prompt of `l` rows.
    #[staticmethod]
    #[pyo3(signature = (backbone, l, seed = 0))]
    fn vanilla(backbone: &PyBackbone, l: usize, seed: u64) -> PyResult<Self> {
        let p = PromptParams::init(&backbone.inner, l, &InitOptions::default(), seed).map_err(err)?;
        Ok(PyAdapter { inner: PeftParams::Vanilla(p) })
    }

    /// Decomposed adapter: `m` prompt rows and a rank-`r` update.
    #[staticmethod]
    #[pyo3(signature = (backbone, m, r, seed = 0))]
    fn dept(backbone: &PyBackbone, m: usize, r: usize, seed: u64) -> PyResult<Self> {
        let p = DeptParams::init(&backbone.inner, m, r, &InitOptions::default(), seed).map_err(err)?;
        Ok(PyAdapter { inner: PeftParams::Dept(p) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(err)?;
        Ok(PyAdapter { inner: PeftParams::from_checkpoint(&ck).map_err(err)? })
    }

    /// `budget_len` is the vanilla length the adapter was sized against.
    fn save(&self, path: &str, budget_len: usize) -> PyResult<()> {
        self.inner.to_checkpoint(budget_len).save(path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.tag().as_str()
    }

    #[getter]
    fn prompt_len(&self) -> usize {
        self.inner.prompt_len()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn trainable_params(&self) -> usize {
        self.inner.trainable_params()
    }

    /// Label-position logits through `backbone`, `[B][V]`.
    fn logits(&self, backbone: &PyBackbone, seqs: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
        let b = batch(seqs)?;
        let out = harness::label_logits(&backbone.inner, &self.inner.detached(), &b).map_err(err)?;
        Ok(rows(out.to_vec(), backbone.inner.config().vocab_size))
    }
}

#[pyfunction]
fn solve_budget<'py>(py: Python<'py>, l: usize, d: usize, s: usize, m: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &dept_core::solve_budget(l, d, s, m).map_err(err)?)
}

#[pyfunction]
fn flop_count<'py>(py: Python<'py>, backbone: &PyBackbone, n: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &bench::flop_count(backbone.inner.config(), n))
}

#[pyfunction]
fn memory_estimate(backbone: &PyBackbone, n: usize, batch: usize) -> u64 {
    bench::memory_estimate(backbone.inner.config(), n, batch)
}

/// Fully defaulted experiment configuration with optional dotted overrides.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None))]
fn resolve_config<'py>(
    py: Python<'py>,
    config: Option<&Bound<'py, PyAny>>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut pairs = Vec::new();
    if let Some(o) = overrides {
        for (k, v) in o.iter() {
            let raw: String = py.import("json")?.call_method1("dumps", (v,))?.extract()?;
            pairs.push((k.extract::<String>()?, raw));
        }
    }
    let cfg = config::resolve(from_py(py, config)?, &pairs).map_err(err)?;
    to_py(py, &cfg)
}

/// Generated `(train, eval)` examples of the configured target task, each
/// a list of `(tokens, label)` pairs.
#[pyfunction]
#[pyo3(signature = (config = None))]
#[allow(clippy::type_complexity)]
fn task_data(
    py: Python<'_>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Vec<(Vec<usize>, usize)>, Vec<(Vec<usize>, usize)>)> {
    let cfg = experiment(py, config)?;
    let (train, eval) = harness::task_data(&cfg).map_err(err)?;
    let pairs = |v: Vec<Example>| v.into_iter().map(|e| (e.tokens, e.label)).collect();
    Ok((pairs(train), pairs(eval)))
}

/// Train an adapter shaped by `config["peft"]`; returns the best adapter
/// and the run report.
#[pyfunction]
#[pyo3(signature = (backbone, config = None, seed = 0))]
fn train<'py>(
    py: Python<'py>,
    backbone: &PyBackbone,
    config: Option<&Bound<'py, PyAny>>,
    seed: u64,
) -> PyResult<(PyAdapter, Bound<'py, PyAny>)> {
    let cfg = experiment(py, config)?;
    let (train, eval) = harness::task_data(&cfg).map_err(err)?;
    let shape = cfg.peft.resolve(backbone.inner.config()).map_err(err)?;
    let params = harness::new_adapter(&backbone.inner, &shape, &cfg.peft.init, seed).map_err(err)?;
    let variant = PeftVariant::new(params, cfg.optim.rates()).map_err(err)?;
    let out = harness::train_peft(&backbone.inner, variant, &train, &eval, &harness::train_spec(&cfg, seed))
        .map_err(err)?;
    Ok((PyAdapter { inner: out.best }, to_py(py, &out.report)?))
}

/// Accuracy and loss of `adapter` on the configured evaluation set.
#[pyfunction]
#[pyo3(signature = (backbone, adapter, config = None))]
fn evaluate<'py>(
    py: Python<'py>,
    backbone: &PyBackbone,
    adapter: &PyAdapter,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = experiment(py, config)?;
    let (_, eval) = harness::task_data(&cfg).map_err(err)?;
    let candidates = cfg.target_task().label_tokens();
    let metric = harness::evaluate(&backbone.inner, &adapter.inner, &eval, &candidates, cfg.train.eval_batch_size)
        .map_err(err)?;
    to_py(py, &metric)
}

/// Prompt-length cost sweep from `config["bench"]`.
#[pyfunction]
#[pyo3(signature = (backbone, config = None, seed = 0))]
fn sweep<'py>(
    py: Python<'py>,
    backbone: &PyBackbone,
    config: Option<&Bound<'py, PyAny>>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = experiment(py, config)?;
    to_py(py, &bench::sweep(&backbone.inner, &cfg.bench, seed).map_err(err)?)
}

#[pymodule]
fn dept(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyAdapter>()?;
    m.add_function(wrap_pyfunction!(solve_budget, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(memory_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(task_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
