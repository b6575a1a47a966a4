use std::path::PathBuf;

use fwlab::experiment::{self, RunOptions};
use fwlab::model::{check_assumptions, DiffusionModel, ModelSpec};
use fwlab::montecarlo::{self, EventSpec, McCell, McConfig};
use fwlab::optimize::{self, OptimizerConfig};
use fwlab::paths::{DiscretePath, TimeGrid};
use fwlab::simulate::{euler_maruyama, SimConfig};
use fwlab::{action, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Io(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn optimizer(nodes: usize) -> OptimizerConfig {
    OptimizerConfig::default().with_nodes(nodes)
}

/// A drift-diffusion model `dX = (-a∇V + c) dt + √(2ε) σ dB`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: DiffusionModel,
}

#[pymethods]
impl PyModel {
    /// Builds a model from the TOML text of a `[model]` block body.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModel {
            inner: DiffusionModel::from_spec(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (gamma = 1.0))]
    fn rotational_ou(gamma: f64) -> Self {
        PyModel {
            inner: DiffusionModel::rotational_ou(gamma),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (gamma = 1.0))]
    fn bounded_rotation(gamma: f64) -> Self {
        PyModel {
            inner: DiffusionModel::bounded_rotation(gamma),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (circulation = 0.0))]
    fn double_well(circulation: f64) -> Self {
        PyModel {
            inner: DiffusionModel::double_well(circulation),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family().to_string()
    }

    fn drift(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.drift(&x).map_err(py_err)
    }

    #[pyo3(signature = (radii = vec![1.0, 2.0, 4.0, 8.0], eps0 = 1.0))]
    fn check<'py>(&self, py: Python<'py>, radii: Vec<f64>, eps0: f64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &check_assumptions(&self.inner, &radii, eps0))
    }

    fn __repr__(&self) -> String {
        format!("Model(family={:?}, dim={})", self.inner.family(), self.inner.dim())
    }
}

fn path_from_rows(model: &DiffusionModel, horizon: f64, rows: Vec<Vec<f64>>) -> PyResult<DiscretePath> {
    if rows.len() < 2 {
        return Err(PyValueError::new_err("a path needs at least two nodes"));
    }
    let n = model.dim();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("every node must match the model dimension"));
    }
    let grid = TimeGrid::new(horizon, rows.len() - 1).map_err(py_err)?;
    DiscretePath::new(grid, n, rows.concat()).map_err(py_err)
}

/// Action and work observable of a uniformly sampled path on `[0, T]`.
#[pyfunction]
#[pyo3(signature = (model, horizon, nodes, eps = 0.0))]
fn path_action<'py>(
    py: Python<'py>,
    model: &PyModel,
    horizon: f64,
    nodes: Vec<Vec<f64>>,
    eps: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let path = path_from_rows(&model.inner, horizon, nodes)?;
    let report = action::ActionReport::new(
        action::fw_action(&model.inner, &path),
        action::gc_observable(&model.inner, &path, eps),
    );
    to_py(py, &report)
}

/// One Euler-Maruyama trajectory as a list of nodes.
#[pyfunction]
#[pyo3(signature = (model, eps, horizon, dt, x0, seed = 0))]
fn simulate(model: &PyModel, eps: f64, horizon: f64, dt: f64, x0: Vec<f64>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let grid = TimeGrid::with_step(horizon, dt).map_err(py_err)?;
    let cfg = SimConfig::new(eps, grid, seed).map_err(py_err)?;
    let path = euler_maruyama(&model.inner, &cfg, &x0).map_err(py_err)?;
    Ok(path.nodes().chunks(path.dim()).map(<[f64]>::to_vec).collect())
}

/// Minimal rate over loops carrying work `q`.
#[pyfunction]
#[pyo3(signature = (model, q, nodes = 128))]
fn rate_point<'py>(py: Python<'py>, model: &PyModel, q: f64, nodes: usize) -> PyResult<Bound<'py, PyAny>> {
    let p = optimize::rate_point(&model.inner, q, &optimizer(nodes)).map_err(py_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("q", p.q)?;
    dict.set_item("s", p.s)?;
    dict.set_item("lambda", p.lambda)?;
    dict.set_item("period", p.measure.as_ref().map(|m| m.period()))?;
    dict.set_item("residual", p.residual)?;
    dict.set_item("converged", p.converged)?;
    dict.set_item("infeasible", p.infeasible)?;
    Ok(dict.into_any())
}

/// `s(q)` on a grid, with the fluctuation-theorem defect when the grid is
/// symmetric.
#[pyfunction]
#[pyo3(signature = (model, q, nodes = 128))]
fn rate_curve(model: &PyModel, q: Vec<f64>, nodes: usize) -> PyResult<(Vec<f64>, Vec<f64>, Option<f64>)> {
    let curve = optimize::rate_curve(&model.inner, &q, &optimizer(nodes)).map_err(py_err)?;
    let defect = optimize::ft_defect(&curve).ok();
    Ok((curve.s, curve.lambda, defect))
}

/// Direct Monte Carlo estimate of `P(|W_T - q| ≤ δ)`.
#[pyfunction]
#[pyo3(signature = (model, eps, horizon, q, delta = None, samples = 10000, dt = 0.01, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn estimate_direct<'py>(
    py: Python<'py>,
    model: &PyModel,
    eps: f64,
    horizon: f64,
    q: f64,
    delta: Option<f64>,
    samples: usize,
    dt: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut event = EventSpec::work(q);
    if let Some(d) = delta {
        event = event.with_delta(d);
    }
    let cfg = McConfig {
        dt,
        samples,
        seed,
        ..McConfig::default()
    };
    let records = montecarlo::estimate_direct(&model.inner, &[McCell { eps, horizon }], &cfg, &event).map_err(py_err)?;
    to_py(py, &records[0])
}

/// Runs an experiment file like `fwlab run` and returns the exit code.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None, threads = None))]
fn run_experiment(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, threads: Option<usize>) -> i32 {
    let opts = RunOptions { seed, out, threads };
    match experiment::run(&config, &opts) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => e.exit_code(),
    }
}

/// Summary tables over run directories, as CSV text.
#[pyfunction]
fn report(dirs: Vec<PathBuf>) -> PyResult<String> {
    experiment::report(&dirs).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "fwlab")]
fn fwlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(path_action, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(rate_point, m)?)?;
    m.add_function(wrap_pyfunction!(rate_curve, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_direct, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
