//! Python bindings.
//!
//! Configurations cross the boundary as TOML text so that Python callers
//! share the file format of the command line tool.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use crowdtruth::engine::{self, TdConfig};
use crowdtruth::experiment::{self, ExperimentConfig};
use crowdtruth::features::{self, DataFeature};
use crowdtruth::model::{SensingReport, SlotBatch};
use crowdtruth::simulator;
use crowdtruth::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Config { .. } => PyValueError::new_err(err.to_string()),
        Error::Io(_) | Error::MissingInput(_) => PyOSError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn experiment_config(config: Option<&str>) -> PyResult<ExperimentConfig> {
    match config {
        Some(text) => ExperimentConfig::from_toml(text).map_err(to_py),
        None => Ok(ExperimentConfig::default()),
    }
}

/// One evaluated report.
#[pyclass(name = "QualityRecord", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyQualityRecord {
    mu: u32,
    region: u32,
    value: f64,
    expected_score: f64,
    score: f64,
    quality: f64,
    kept: bool,
}

#[pymethods]
impl PyQualityRecord {
    fn __repr__(&self) -> String {
        format!(
            "QualityRecord(mu={}, region={}, value={}, quality={:.6}, kept={})",
            self.mu,
            self.region,
            self.value,
            self.quality,
            if self.kept { "True" } else { "False" }
        )
    }
}

/// Result of one slot.
#[pyclass(name = "SlotOutcome", frozen, get_all)]
struct PySlotOutcome {
    slot: u32,
    records: Vec<PyQualityRecord>,
    iterations: usize,
    converged: bool,
}

impl From<engine::SlotOutcome> for PySlotOutcome {
    fn from(o: engine::SlotOutcome) -> Self {
        Self {
            slot: o.slot,
            records: o
                .records
                .iter()
                .map(|r| PyQualityRecord {
                    mu: r.report.mu,
                    region: r.report.region,
                    value: r.report.value,
                    expected_score: r.expected_score,
                    score: r.score,
                    quality: r.quality,
                    kept: r.kept,
                })
                .collect(),
            iterations: o.iterations,
            converged: o.converged,
        }
    }
}

/// Streaming truth discovery over users `1..=users` and regions `1..=regions`.
///
/// `config` is the TOML body of a `[td]` table; omitted keys keep defaults.
#[pyclass(name = "TruthDiscovery")]
struct PyTruthDiscovery {
    inner: engine::TruthDiscovery,
}

#[pymethods]
impl PyTruthDiscovery {
    #[new]
    #[pyo3(signature = (users, regions, config=None))]
    fn new(users: usize, regions: u32, config: Option<&str>) -> PyResult<Self> {
        let cfg: TdConfig = match config {
            Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TdConfig::default(),
        };
        let inner = engine::TruthDiscovery::new(cfg, users, regions).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Evaluates `reports`, a list of `(mu, region, value)`, for `slot`.
    /// `predictions` holds one optional predicted value per region.
    fn run_slot(
        &mut self,
        slot: u32,
        reports: Vec<(u32, u32, f64)>,
        predictions: Vec<Option<f64>>,
    ) -> PyResult<PySlotOutcome> {
        let reports = reports
            .into_iter()
            .map(|(mu, region, value)| SensingReport::new(mu, slot, region, value))
            .collect();
        let batch = SlotBatch::new(slot, reports).map_err(to_py)?;
        let outcome = self.inner.run_slot(batch, &predictions).map_err(to_py)?;
        Ok(outcome.into())
    }

    #[getter]
    fn reputations(&self) -> Vec<f64> {
        self.inner.ledger().current().to_vec()
    }

    /// `True` for users whose reputation is below the malicious threshold.
    fn malicious(&self) -> Vec<bool> {
        engine::classify_mus(self.inner.ledger())
            .into_iter()
            .map(|l| l == engine::UserLabel::Malicious)
            .collect()
    }
}

#[pyfunction]
#[pyo3(signature = (r, q, alpha=0.018, beta=0.06, gamma=0.5))]
fn reputation_update(r: f64, q: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    engine::reputation_update_unclamped(r, q, alpha, beta, gamma)
}

/// Cosine implication between two `(circumstance, user)` feature pairs.
#[pyfunction]
fn implication(a: (f64, f64), b: (f64, f64)) -> f64 {
    let f = |(circumstance, user)| DataFeature { circumstance, user };
    features::implication(&f(a), &f(b))
}

#[pyfunction]
#[pyo3(signature = (value, predicted, circumstance=0.0))]
fn feature(value: f64, predicted: f64, circumstance: f64) -> (f64, f64) {
    let f = features::scaled_feature(value, predicted, circumstance);
    (f.circumstance, f.user)
}

/// Simulated scenario for the `[scenario]` table of an experiment config.
#[pyclass(name = "World", frozen, get_all)]
struct PyWorld {
    /// `truth[t][n]` for slot `t + 1`, region `n + 1`.
    truth: Vec<Vec<f64>>,
    /// `(mu, slot, region, value)` in slot order.
    reports: Vec<(u32, u32, u32, f64)>,
    /// Indexed by `mu - 1`.
    malicious: Vec<bool>,
}

#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn simulate(config: Option<&str>, seed: Option<u64>) -> PyResult<PyWorld> {
    let mut cfg = experiment_config(config)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    let world = simulator::simulate(&cfg.scenario).map_err(to_py)?;
    let truth = (1..=world.truth.slots())
        .map(|t| {
            world
                .truth
                .slot_vector(t)
                .means
                .into_iter()
                .map(|v| v.unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    Ok(PyWorld {
        truth,
        reports: world.reports().map(|r| (r.mu, r.slot, r.region, r.value)).collect(),
        malicious: world.malicious_flags(),
    })
}

/// Runs the configured methods and returns one summary per method:
/// `(method, f1, reputation_distance, noise_reduction_ratio, runs, failures)`.
/// Means are `None` when no repetition succeeded.
#[pyfunction]
#[pyo3(signature = (config=None, repetitions=None))]
#[allow(clippy::type_complexity)]
fn run_experiment(
    py: Python<'_>,
    config: Option<&str>,
    repetitions: Option<usize>,
) -> PyResult<Vec<(String, Option<f64>, Option<f64>, Option<f64>, usize, usize)>> {
    let mut cfg = experiment_config(config)?;
    if let Some(n) = repetitions {
        cfg.repetitions = n;
        cfg.validate().map_err(to_py)?;
    }
    let mut reps = py.detach(|| experiment::repeat_harness(&cfg, &cfg.seeds()));
    if reps.iter().all(|r| r.results.is_err()) {
        if let Some(Err(e)) = reps.drain(..).next().map(|r| r.results) {
            return Err(to_py(e));
        }
    }
    Ok(experiment::summarize(&cfg.methods, &reps)
        .into_iter()
        .map(|s| {
            (
                s.method.name().to_string(),
                s.mean.map(|m| m.f1),
                s.mean.map(|m| m.reputation_distance),
                s.mean.map(|m| m.noise_reduction_ratio),
                s.runs.len(),
                s.failures.len(),
            )
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "crowdtruth")]
fn crowdtruth_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTruthDiscovery>()?;
    m.add_class::<PySlotOutcome>()?;
    m.add_class::<PyQualityRecord>()?;
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(reputation_update, m)?)?;
    m.add_function(wrap_pyfunction!(implication, m)?)?;
    m.add_function(wrap_pyfunction!(feature, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
