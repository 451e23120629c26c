//! Python bindings: datasets, training, losses, thresholds and fairness
//! reports. Structured results (reports, telemetry) come back as plain
//! dicts and lists.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use fairfpr::checkpoint::{self, Checkpoint};
use fairfpr::cli::config::{self, GenerateConfig, RunConfig};
use fairfpr::encoder::{self, EncoderParams};
use fairfpr::losses::{self, LogitsBatch, LossConfig, LossKind};
use fairfpr::metrics::{self, GroupedScores};
use fairfpr::numerics::{self, Matrix};
use fairfpr::trainer::{self, TelemetryRecord};
use fairfpr::{synthdata, thresholding};

fn to_py_err(e: fairfpr::Error) -> PyErr {
    use fairfpr::Error as E;
    match e {
        E::Io { .. } => PyOSError::new_err(e.to_string()),
        E::Diverged { .. } | E::NonFinite(_) | E::Degenerate(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn run_config(config_json: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg: RunConfig = match config_json {
        Some(text) => config::parse(text, std::path::Path::new("<config>")).map_err(to_py_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// A grouped synthetic dataset of unit-norm feature vectors.
#[pyclass(name = "Dataset", module = "pyfairfpr", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: synthdata::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate a dataset. `config_json` takes the same JSON as
    /// `fairfpr generate --config`; without it the 4-group default is used.
    #[staticmethod]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn generate(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut cfg: GenerateConfig = match config_json {
            Some(text) => config::parse(text, std::path::Path::new("<config>")).map_err(to_py_err)?,
            None => GenerateConfig::default(),
        };
        cfg.seed = seed;
        let inner = synthdata::generate(&cfg.groups, cfg.raw_dim, cfg.seed).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// Load `<base>.header.json` + `<base>.features.csv`.
    #[staticmethod]
    fn load(base: &str) -> PyResult<Self> {
        let inner = synthdata::load(std::path::Path::new(base)).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, base: &str) -> PyResult<()> {
        synthdata::save(&self.inner, std::path::Path::new(base)).map_err(to_py_err)
    }

    /// `(train, eval)` with `holdout` identities per group moved to eval.
    fn split(&self, holdout: usize) -> PyResult<(Self, Self)> {
        let (a, b) = fairfpr::cli::commands::split_dataset(&self.inner, holdout).map_err(to_py_err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn raw_dim(&self) -> usize {
        self.inner.raw_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features.to_rows()
    }

    #[getter]
    fn identity_labels(&self) -> Vec<usize> {
        self.inner.identity_labels.clone()
    }

    #[getter]
    fn group_labels(&self) -> Vec<String> {
        self.inner.group_labels.clone()
    }

    fn group_ids(&self) -> Vec<String> {
        self.inner.group_ids()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(samples={}, classes={}, groups={:?}, raw_dim={})",
            self.inner.len(),
            self.inner.num_classes(),
            self.inner.group_ids(),
            self.inner.raw_dim()
        )
    }
}

/// Encoder plus classifier weights, with the telemetry of the run that
/// produced them (empty for loaded checkpoints).
#[pyclass(name = "Model", module = "pyfairfpr")]
struct PyModel {
    checkpoint: Checkpoint,
    telemetry: Vec<TelemetryRecord>,
    epochs: Vec<trainer::EpochSummary>,
}

#[pymethods]
impl PyModel {
    /// Load `<base>.json` + `<base>.csv`.
    #[staticmethod]
    fn load(base: &str) -> PyResult<Self> {
        let checkpoint = checkpoint::load(std::path::Path::new(base)).map_err(to_py_err)?;
        Ok(Self {
            checkpoint,
            telemetry: Vec::new(),
            epochs: Vec::new(),
        })
    }

    fn save(&self, base: &str) -> PyResult<()> {
        checkpoint::save(&self.checkpoint, std::path::Path::new(base)).map_err(to_py_err)
    }

    /// Unit-norm embeddings of the given raw feature rows.
    fn embed(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(features, "features")?;
        Ok(encoder::embed(&self.checkpoint.encoder, &x).map_err(to_py_err)?.to_rows())
    }

    /// Fairness report (dict) on `dataset` at each overall FPR in `gammas`.
    #[pyo3(signature = (dataset, gammas=vec![1e-3, 1e-2, 1e-1], max_pairs_per_group=50_000, roc_points=101))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        gammas: Vec<f64>,
        max_pairs_per_group: usize,
        roc_points: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = trainer::EvalOptions {
            max_pairs_per_group,
            roc_points,
            ..Default::default()
        };
        let enc = &self.checkpoint.encoder;
        let data = &dataset.inner;
        let report = py.detach(|| trainer::evaluate(enc, data, &gammas, &opts)).map_err(to_py_err)?;
        json_to_py(py, &report)
    }

    /// Per-iteration telemetry records as dicts.
    #[getter]
    fn telemetry<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.telemetry)
    }

    /// Per-epoch summaries as dicts.
    #[getter]
    fn epochs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.epochs)
    }

    #[getter]
    fn raw_dim(&self) -> usize {
        self.checkpoint.encoder.raw_dim()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.checkpoint.encoder.embed_dim
    }
}

/// Train on `dataset` (all of it; split first if needed). `config_json` takes
/// the JSON of `fairfpr train --config`; only its `train` section is used.
#[pyfunction]
#[pyo3(signature = (dataset, config_json=None, seed=None))]
fn train(py: Python<'_>, dataset: &PyDataset, config_json: Option<&str>, seed: Option<u64>) -> PyResult<PyModel> {
    let cfg = run_config(config_json, seed)?;
    let data = &dataset.inner;
    let outcome = py.detach(|| trainer::train(data, &cfg.train)).map_err(to_py_err)?;
    Ok(PyModel {
        checkpoint: outcome.state.checkpoint(),
        telemetry: outcome.telemetry,
        epochs: outcome.epochs,
    })
}

fn loss_config(kind: &str, s: f64, m: f64, alpha: f64, p: f64, gamma_u: f64) -> PyResult<LossConfig> {
    let kind: LossKind = kind.parse().map_err(to_py_err)?;
    Ok(LossConfig {
        kind,
        s,
        m,
        alpha,
        p,
        gamma_u,
    })
}

type LossResult = (f64, Vec<Vec<f64>>, Option<Vec<f64>>);

/// Loss of a cosine batch. Returns `(loss, grad_wrt_cosines, instance_fpr)`;
/// penalty kinds estimate the batch threshold at `gamma_u` first, other kinds
/// return `None` for the instance FPRs.
#[pyfunction]
#[pyo3(signature = (cosines, labels, kind="fpr-penalty-cosface", s=64.0, m=0.35, alpha=0.05, p=2.0, gamma_u=1e-4))]
#[allow(clippy::too_many_arguments)]
fn loss_forward(
    cosines: Vec<Vec<f64>>,
    labels: Vec<usize>,
    kind: &str,
    s: f64,
    m: f64,
    alpha: f64,
    p: f64,
    gamma_u: f64,
) -> PyResult<LossResult> {
    let cfg = loss_config(kind, s, m, alpha, p, gamma_u)?;
    let batch = LogitsBatch::new(matrix(cosines, "cosines")?, labels).map_err(to_py_err)?;
    let threshold = if cfg.kind.is_penalty() {
        Some(thresholding::estimate_threshold(&batch, gamma_u).map_err(to_py_err)?)
    } else {
        None
    };
    let out = losses::loss_forward(&batch, &cfg, threshold.as_ref()).map_err(to_py_err)?;
    Ok((out.loss, out.grad_wrt_cosines.to_rows(), out.penalty_state.map(|st| st.instance_fpr)))
}

/// `(t_u, k, pool_size, realized_fpr)` for the non-target logits of a batch.
#[pyfunction]
fn estimate_threshold(cosines: Vec<Vec<f64>>, labels: Vec<usize>, gamma_u: f64) -> PyResult<(f64, usize, usize, f64)> {
    let batch = LogitsBatch::new(matrix(cosines, "cosines")?, labels).map_err(to_py_err)?;
    let t = thresholding::estimate_threshold(&batch, gamma_u).map_err(to_py_err)?;
    Ok((t.t_u, t.k, t.pool_size, t.realized_fpr))
}

/// The `k`-th largest value (1-based).
#[pyfunction]
fn kth_largest(values: Vec<f64>, k: usize) -> PyResult<f64> {
    numerics::kth_largest(&values, k).map_err(to_py_err)
}

#[pyfunction]
fn bias_degree_from_rates(group_fprs: Vec<f64>, overall_fpr: f64) -> PyResult<f64> {
    metrics::bias_degree_from_rates(&group_fprs, overall_fpr).map_err(to_py_err)
}

/// Fairness report from scored pairs given as `(similarity, group)` tuples.
#[pyfunction]
#[pyo3(signature = (positives, negatives, gammas, roc_points=101))]
fn fairness_report<'py>(
    py: Python<'py>,
    positives: Vec<(f64, String)>,
    negatives: Vec<(f64, String)>,
    gammas: Vec<f64>,
    roc_points: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let scores = GroupedScores::from_pairs(positives, negatives);
    let report = metrics::fairness_report(&scores, &gammas, roc_points).map_err(to_py_err)?;
    json_to_py(py, &report)
}

/// Randomly initialized model, e.g. as a null baseline.
#[pyfunction]
#[pyo3(signature = (raw_dim, hidden_dims=vec![64, 64], embed_dim=16, seed=0))]
fn init_model(raw_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize, seed: u64) -> PyResult<PyModel> {
    let enc = EncoderParams::init(raw_dim, &hidden_dims, embed_dim, seed).map_err(to_py_err)?;
    Ok(PyModel {
        checkpoint: Checkpoint::new(enc, None, seed, 0, 0),
        telemetry: Vec::new(),
        epochs: Vec::new(),
    })
}

#[pymodule]
fn pyfairfpr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(init_model, m)?)?;
    m.add_function(wrap_pyfunction!(loss_forward, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(kth_largest, m)?)?;
    m.add_function(wrap_pyfunction!(bias_degree_from_rates, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_report, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
