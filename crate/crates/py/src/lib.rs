//! Python bindings: checkpoints, training, pruning, the fuse check, baselines
//! and rank profiles. Structured results cross the boundary as JSON strings.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use ::intraslice::eval::{self, BaselineKind, BaselineSpec};
use ::intraslice::pipeline::{self, IterateFfn, RunConfig, TransformsLog};
use ::intraslice::tmodel::{self, container, ModelConfig, TokenBatch, TrainOptions};
use ::intraslice::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn batch(tokens: Vec<Vec<u32>>) -> PyResult<TokenBatch> {
    TokenBatch::new(tokens).map_err(py_err)
}

#[pyclass(name = "Checkpoint", module = "intraslice", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: tmodel::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Seeded random initialisation; `config_json` defaults to the toy model.
    #[staticmethod]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn random_init(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => ModelConfig::toy(),
        };
        Ok(Self { inner: tmodel::Checkpoint::random_init(&cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: container::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        container::save(&self.inner, path).map_err(py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(json_err)
    }

    fn layout_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.layout).map_err(json_err)
    }

    fn prunable_params(&self) -> usize {
        self.inner.prunable_params()
    }

    fn total_params(&self) -> usize {
        self.inner.total_params()
    }

    /// Logits, one row per token, sequence-major.
    fn logits(&self, tokens: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        let l = tmodel::logits(&self.inner, &batch(tokens)?).map_err(py_err)?;
        Ok((0..l.rows()).map(|r| l.row(r).to_vec()).collect())
    }

    fn perplexity(&self, tokens: Vec<u32>, seq_len: usize) -> PyResult<f64> {
        tmodel::perplexity(&self.inner, &tokens, seq_len).map_err(py_err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Checkpoint(layers={}, hidden={}, params={})", c.layers, c.hidden, self.inner.prunable_params())
    }
}

#[pyclass(name = "PruneResult", module = "intraslice")]
struct PyPruneResult {
    #[pyo3(get)]
    checkpoint: PyCheckpoint,
    /// Report as JSON.
    #[pyo3(get)]
    report: String,
    /// Transforms log as JSON.
    #[pyo3(get)]
    transforms: String,
    #[pyo3(get)]
    realized_sparsity: f64,
}

/// Bundled byte-level corpus split into (train, held_out).
#[pyfunction]
fn corpus() -> (Vec<u32>, Vec<u32>) {
    let t = pipeline::bundled_tokens();
    let (a, b) = pipeline::split_corpus(&t);
    (a.to_vec(), b.to_vec())
}

#[pyfunction]
#[pyo3(signature = (steps=2000, lr=0.1, seed=0))]
fn train_toy(py: Python<'_>, steps: usize, lr: f64, seed: u64) -> PyResult<PyCheckpoint> {
    let tokens = pipeline::bundled_tokens();
    let (train, _) = pipeline::split_corpus(&tokens);
    let (ckpt, _) = py
        .detach(|| tmodel::train_toy(&ModelConfig::toy(), train, steps, lr, seed, &TrainOptions::default()))
        .map_err(py_err)?;
    Ok(PyCheckpoint { inner: ckpt })
}

fn run_config(
    config_json: Option<&str>,
    sparsity: Option<f64>,
    lambda_b: Option<f64>,
    seed: Option<u64>,
    repropagate: Option<bool>,
    iterate_ffn: Option<&str>,
) -> PyResult<RunConfig> {
    let mut c = match config_json {
        Some(s) => RunConfig::from_json(s).map_err(py_err)?,
        None => RunConfig::default(),
    };
    if let Some(v) = sparsity {
        c.sparsity = v;
    }
    if let Some(v) = lambda_b {
        c.lambda_b = v;
    }
    if let Some(v) = seed {
        c.seed = v;
    }
    if let Some(v) = repropagate {
        c.repropagate = v;
    }
    if let Some(v) = iterate_ffn {
        c.iterate_ffn = match v {
            "auto" => IterateFfn::Auto,
            "on" => IterateFfn::On,
            "off" => IterateFfn::Off,
            other => return Err(PyValueError::new_err(format!("iterate_ffn must be auto, on or off, not {other:?}"))),
        };
    }
    c.validate().map_err(py_err)?;
    Ok(c)
}

/// Prune a dense checkpoint; keyword arguments override `config_json`.
#[pyfunction]
#[pyo3(signature = (checkpoint, sparsity=None, lambda_b=None, seed=None, repropagate=None, iterate_ffn=None, config_json=None))]
#[allow(clippy::too_many_arguments)]
fn prune(
    py: Python<'_>,
    checkpoint: &PyCheckpoint,
    sparsity: Option<f64>,
    lambda_b: Option<f64>,
    seed: Option<u64>,
    repropagate: Option<bool>,
    iterate_ffn: Option<&str>,
    config_json: Option<&str>,
) -> PyResult<PyPruneResult> {
    let config = run_config(config_json, sparsity, lambda_b, seed, repropagate, iterate_ffn)?;
    let dense = checkpoint.inner.clone();
    let out = py
        .detach(|| {
            let calib = config.calibration()?;
            pipeline::run_prune(&config, &dense, &calib)
        })
        .map_err(py_err)?;
    Ok(PyPruneResult {
        realized_sparsity: out.report.realized_sparsity,
        report: out.report.to_json().map_err(py_err)?,
        transforms: serde_json::to_string(&out.transforms).map_err(json_err)?,
        checkpoint: PyCheckpoint { inner: out.checkpoint },
    })
}

/// Worst logit divergence between `pruned` and the online-transform model.
#[pyfunction]
#[pyo3(signature = (original, pruned, transforms, trials=4, seed=0))]
fn fuse_check(original: &PyCheckpoint, pruned: &PyCheckpoint, transforms: &str, trials: usize, seed: u64) -> PyResult<f64> {
    let log: TransformsLog = serde_json::from_str(transforms).map_err(json_err)?;
    pipeline::fuse_check(&original.inner, &pruned.inner, &log, trials, seed).map_err(py_err)
}

/// `kind` is `"random"` or `"magnitude"`.
#[pyfunction]
#[pyo3(signature = (checkpoint, kind, sparsity, seed=0))]
fn baseline(checkpoint: &PyCheckpoint, kind: &str, sparsity: f64, seed: u64) -> PyResult<PyCheckpoint> {
    let kind = match kind {
        "random" => BaselineKind::Random,
        "magnitude" => BaselineKind::Magnitude,
        other => return Err(PyValueError::new_err(format!("unknown baseline {other:?}"))),
    };
    let calib = RunConfig { seed, ..RunConfig::default() }.calibration().map_err(py_err)?;
    let (p, _) = eval::baseline_prune(&checkpoint.inner, &calib, &BaselineSpec { kind, sparsity, seed }).map_err(py_err)?;
    Ok(PyCheckpoint { inner: p })
}

/// Per-layer energy ranks of the block outputs on the default calibration set.
#[pyfunction]
#[pyo3(signature = (checkpoint, tau=0.99, seed=0))]
fn rank_profile(checkpoint: &PyCheckpoint, tau: f64, seed: u64) -> PyResult<Vec<usize>> {
    let calib = RunConfig { seed, ..RunConfig::default() }.calibration().map_err(py_err)?;
    Ok(eval::rank_profile(&checkpoint.inner, &calib, tau).map_err(py_err)?.ranks)
}

#[pymodule]
#[pyo3(name = "intraslice")]
fn intraslice_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyPruneResult>()?;
    m.add_function(wrap_pyfunction!(corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_check, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(rank_profile, m)?)?;
    Ok(())
}
