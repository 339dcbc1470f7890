//! Python module `medtmle`: schemas, data, likelihood fits, g-computation,
//! TMLE (one-step, iterative, HAL-EIC), intervals and the simulation study.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use medtmle::data::Dataset;
use medtmle::gcomp::{psi_all, TargetSpec};
use medtmle::haleic::{haleic_tmle, HalConfig, Sampling};
use medtmle::inference::{simultaneous_ci, with_contrasts, DEFAULT_MC_DRAWS};
use medtmle::likelihood::{fit_initial, FactorizedLikelihood, ModelSpec};
use medtmle::schema::{NodeSchema, EMPTY};
use medtmle::simstudy::{run_study, simulate_dataset, true_targets, ScenarioSpec};
use medtmle::tmle::{run_tmle, Mode, TmleConfig, TmleResult};

fn err(e: medtmle::Error) -> PyErr {
    match e {
        medtmle::Error::Data(_)
        | medtmle::Error::InvalidRow { .. }
        | medtmle::Error::Config(_)
        | medtmle::Error::Schema(_)
        | medtmle::Error::DuplicateNode(_)
        | medtmle::Error::EmptySupport(_)
        | medtmle::Error::OutcomeOutsideBlock(_)
        | medtmle::Error::UnknownNode(_)
        | medtmle::Error::Target(_)
        | medtmle::Error::Json(_)
        | medtmle::Error::Csv(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn scenario(json: Option<&str>) -> PyResult<ScenarioSpec> {
    match json {
        Some(t) => ScenarioSpec::from_json(t).map_err(err),
        None => Ok(ScenarioSpec::default()),
    }
}

#[pyclass(name = "Schema", frozen)]
#[derive(Clone)]
struct PySchema {
    inner: Arc<NodeSchema>,
}

#[pymethods]
impl PySchema {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySchema {
            inner: Arc::new(NodeSchema::from_json(text).map_err(err)?),
        })
    }

    /// Schema of the built-in simulation design with `k` time points.
    #[staticmethod]
    #[pyo3(signature = (k = 2))]
    fn design(k: usize) -> PyResult<Self> {
        Ok(PySchema {
            inner: medtmle::simstudy::dgp_schema(k).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.to_spec()).map_err(|e| err(e.into()))
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.nodes().iter().map(|n| n.name.clone()).collect()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Data", frozen)]
#[derive(Clone)]
struct PyData {
    schema: Arc<NodeSchema>,
    inner: Dataset,
}

#[pymethods]
impl PyData {
    /// Parses CSV text whose header matches the schema; `NA` marks undefined values.
    #[staticmethod]
    fn from_csv(schema: &PySchema, text: &str) -> PyResult<Self> {
        Ok(PyData {
            schema: schema.inner.clone(),
            inner: Dataset::read_csv(&schema.inner, text.as_bytes()).map_err(err)?,
        })
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&self.schema, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Rows as literal values, with None for undefined entries.
    fn rows(&self) -> Vec<Vec<Option<i64>>> {
        self.inner
            .rows()
            .map(|r| {
                r.iter()
                    .zip(self.schema.nodes())
                    .map(|(&v, n)| if v == EMPTY { None } else { n.literal(v) })
                    .collect()
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Targets", frozen)]
#[derive(Clone)]
struct PyTargets {
    inner: TargetSpec,
}

#[pymethods]
impl PyTargets {
    #[staticmethod]
    fn from_json(schema: &PySchema, text: &str) -> PyResult<Self> {
        Ok(PyTargets {
            inner: TargetSpec::from_json(&schema.inner, text).map_err(err)?,
        })
    }

    /// Targets of the built-in design: Y_t under (1,1), (1,0), (0,0).
    #[staticmethod]
    #[pyo3(signature = (k = 2))]
    fn design(k: usize) -> PyResult<Self> {
        let spec = ScenarioSpec {
            k,
            ..ScenarioSpec::default()
        };
        let s = spec.schema().map_err(err)?;
        Ok(PyTargets {
            inner: spec.targets(&s).map_err(err)?,
        })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.entries.iter().map(|t| t.label.clone()).collect()
    }

    #[getter]
    fn contrasts(&self) -> Vec<String> {
        self.inner.contrasts.iter().map(|c| c.label.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Likelihood", frozen)]
#[derive(Clone)]
struct PyLikelihood {
    inner: FactorizedLikelihood,
}

#[pymethods]
impl PyLikelihood {
    /// Fits the initial likelihood; `model` is a model-spec JSON string.
    #[staticmethod]
    #[pyo3(signature = (data, model = None))]
    fn fit(data: &PyData, model: Option<&str>) -> PyResult<Self> {
        let spec = match model {
            Some(t) => serde_json::from_str(t).map_err(|e| err(e.into()))?,
            None => ModelSpec::default(),
        };
        let (inner, _) = fit_initial(&data.inner, data.schema.clone(), &spec).map_err(err)?;
        Ok(PyLikelihood { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyLikelihood {
            inner: FactorizedLikelihood::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Plug-in values of every target.
    fn psi(&self, targets: &PyTargets) -> Vec<f64> {
        psi_all(&self.inner, &targets.inner)
    }

    /// Mean log-likelihood per row.
    fn log_likelihood(&self, data: &PyData) -> PyResult<f64> {
        self.inner.log_likelihood(&data.inner).map_err(err)
    }

    /// Conditional probability of `level` (a support literal) at `node`
    /// given the literal values of all earlier nodes.
    fn prob(&self, node: &str, level: i64, parents: Vec<Option<i64>>) -> PyResult<f64> {
        let s = self.inner.schema();
        let i = s.index_of(node).map_err(err)?;
        let x = s
            .node(i)
            .position(level)
            .ok_or_else(|| PyValueError::new_err(format!("level {level} not in support of `{node}`")))?;
        let mut row = parents;
        row.resize(s.len(), None);
        let pos = s.positions_from_literals(&row).map_err(err)?;
        self.inner.conditional_prob(i, x, &pos[..i]).map_err(err)
    }
}

fn result_dict<'py>(
    py: Python<'py>,
    r: &TmleResult,
    targets: &TargetSpec,
    level: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let (labels, estimates, ic) = with_contrasts(targets, &r.estimates, &r.totals).map_err(err)?;
    let table = simultaneous_ci(&labels, &estimates, &ic, level, DEFAULT_MC_DRAWS, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("labels", labels)?;
    d.set_item("estimates", estimates)?;
    d.set_item("se", table.rows.iter().map(|x| x.se).collect::<Vec<_>>())?;
    d.set_item(
        "ci",
        table.rows.iter().map(|x| (x.ci_lo, x.ci_hi)).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "ci_simultaneous",
        table.rows.iter().map(|x| (x.ci_lo_simul, x.ci_hi_simul)).collect::<Vec<_>>(),
    )?;
    d.set_item("q_simultaneous", table.covariance.q_simultaneous)?;
    d.set_item("converged", r.converged)?;
    d.set_item("iterations", r.trace.len().saturating_sub(1))?;
    d.set_item("positivity_breaches", r.positivity_breaches)?;
    d.set_item(
        "score_trace",
        r.trace.iter().map(|e| e.scores.clone()).collect::<Vec<_>>(),
    )?;
    d.set_item("likelihood", PyLikelihood { inner: r.likelihood.clone() })?;
    Ok(d)
}

/// Targets the initial likelihood. `mode` is "onestep", "iterative" or
/// "haleic". Returns a dict with estimates, contrasts and intervals.
#[pyfunction]
#[pyo3(signature = (likelihood, data, targets, mode = "onestep", dx = 0.01, max_iter = 500, hal_n = None, level = 0.95, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn tmle<'py>(
    py: Python<'py>,
    likelihood: &PyLikelihood,
    data: &PyData,
    targets: &PyTargets,
    mode: &str,
    dx: f64,
    max_iter: usize,
    hal_n: Option<usize>,
    level: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TmleConfig {
        mode: if mode == "iterative" { Mode::Iterative } else { Mode::OneStep },
        dx,
        max_iterations: max_iter,
        ..TmleConfig::default()
    };
    let r = match mode {
        "onestep" | "iterative" => {
            py.allow_threads(|| run_tmle(&likelihood.inner, &data.inner, &targets.inner, &cfg))
        }
        "haleic" => {
            let hal = HalConfig {
                sampling: Sampling::Resample(hal_n),
                seed,
                ..HalConfig::default()
            };
            py.allow_threads(|| haleic_tmle(&likelihood.inner, &data.inner, &targets.inner, &hal, &cfg))
                .map(|h| h.result)
        }
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    }
    .map_err(err)?;
    result_dict(py, &r, &targets.inner, level, seed)
}

/// Simulates a data set from a scenario JSON (default design if None).
#[pyfunction]
#[pyo3(signature = (seed, scenario = None, n = None))]
fn simulate(seed: u64, scenario: Option<&str>, n: Option<usize>) -> PyResult<(PySchema, PyData)> {
    let mut spec = self::scenario(scenario)?;
    if let Some(n) = n {
        spec.n = n;
    }
    spec.validate().map_err(err)?;
    let schema = spec.schema().map_err(err)?;
    let data = simulate_dataset(&spec, seed).map_err(err)?;
    Ok((
        PySchema { inner: schema.clone() },
        PyData {
            schema,
            inner: data,
        },
    ))
}

/// Exact target values of a scenario as (label, value) pairs.
#[pyfunction]
#[pyo3(signature = (scenario = None))]
fn truth(scenario: Option<&str>) -> PyResult<Vec<(String, f64)>> {
    let spec = self::scenario(scenario)?;
    Ok(true_targets(&spec)
        .map_err(err)?
        .into_iter()
        .map(|t| (t.target, t.value))
        .collect())
}

/// Runs a replicate study and returns its metrics table as CSV text.
#[pyfunction]
#[pyo3(signature = (scenario, jobs = 1))]
fn study(py: Python<'_>, scenario: &str, jobs: usize) -> PyResult<String> {
    let spec = self::scenario(Some(scenario))?;
    let out = py.allow_threads(|| run_study(&spec, jobs)).map_err(err)?;
    let mut buf = Vec::new();
    out.table.write_csv(&mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "medtmle")]
fn medtmle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyData>()?;
    m.add_class::<PyTargets>()?;
    m.add_class::<PyLikelihood>()?;
    m.add_function(wrap_pyfunction!(tmle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(truth, m)?)?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    Ok(())
}
