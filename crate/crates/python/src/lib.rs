//! Python bindings: scenarios, runs and the per-node protocol pieces.

use std::collections::BTreeMap;

use chanalloc::metrics::CSV_FILES;
use chanalloc::{
    classify_link, run_with, select_candidate as select, CandidateEntry, CandidateTable, Decision, DriftMode,
    MonitorParams, MonitorState, PathDelayEstimate, RunOptions, RunResult, ScenarioConfig, Selection,
};
use chanalloc::{Channel, RelayId};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn channel(number: u8) -> PyResult<Channel> {
    Channel::new(number).map_err(value_err)
}

/// A validated scenario configuration.
#[pyclass(module = "pychanalloc", from_py_object)]
#[derive(Clone)]
struct Scenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        chanalloc::builtin(name).map(|cfg| Self { cfg }).map_err(value_err)
    }

    /// Builtin name, scenario JSON path or run manifest path.
    #[staticmethod]
    fn load(spec: &str) -> PyResult<Self> {
        chanalloc::load_scenario(spec).map(|cfg| Self { cfg }).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ScenarioConfig::from_json(text).map(|cfg| Self { cfg }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.cfg.to_json()
    }

    /// Copy rescaled to `duration_s`, toggles moved proportionally.
    fn scaled(&self, duration_s: f64) -> PyResult<Self> {
        let mut cfg = self.cfg.clone();
        cfg.scale_to_duration(duration_s).map_err(value_err)?;
        cfg.validate().map_err(value_err)?;
        Ok(Self { cfg })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.cfg.name
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.cfg.duration_s
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    #[getter]
    fn channels(&self) -> Vec<u32> {
        self.cfg.channels.iter().map(|&c| c.into()).collect()
    }

    #[getter]
    fn source_count(&self) -> usize {
        self.cfg.sources.count
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, duration_s={}, seed={})", self.cfg.name, self.cfg.duration_s, self.cfg.seed)
    }
}

/// Outcome of one simulation run.
#[pyclass(module = "pychanalloc", frozen)]
struct RunReport {
    result: RunResult,
}

#[pymethods]
impl RunReport {
    #[getter]
    fn seed(&self) -> u64 {
        self.result.seed
    }

    #[getter]
    fn generated(&self) -> u64 {
        self.result.generated
    }

    #[getter]
    fn delivered(&self) -> u64 {
        self.result.delivered
    }

    #[getter]
    fn dropped(&self) -> u64 {
        self.result.dropped()
    }

    #[getter]
    fn residual(&self) -> u64 {
        self.result.residual
    }

    #[getter]
    fn trace_digest(&self) -> u64 {
        self.result.trace_digest
    }

    #[getter]
    fn trace(&self) -> Option<String> {
        self.result.trace.clone()
    }

    fn conserved(&self) -> bool {
        self.result.conserved()
    }

    /// CSV tables keyed by file name.
    fn csvs(&self) -> BTreeMap<&'static str, String> {
        self.result.summary().csv_files().into_iter().collect()
    }

    /// Mean sources per channel over minutes `[start, end)`.
    fn mean_occupancy(&self, start: u64, end: u64) -> BTreeMap<u8, f64> {
        let t = self.result.summary();
        t.mean_occupancy(start, end).into_iter().map(|(c, v)| (c.number(), v)).collect()
    }

    fn channel_mean_latency_ms(&self) -> BTreeMap<u8, f64> {
        let t = self.result.summary();
        t.channel_mean_latency().into_iter().map(|(c, v)| (c.number(), v)).collect()
    }

    fn hop_mean_latency_ms(&self) -> BTreeMap<u32, f64> {
        self.result.summary().hop_mean_latency()
    }

    fn seek_durations_ms(&self) -> Vec<f64> {
        self.result
            .metrics
            .seeks()
            .iter()
            .map(|s| s.duration_us as f64 / 1000.0)
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport(seed={}, generated={}, delivered={}, dropped={})",
            self.result.seed,
            self.result.generated,
            self.result.delivered,
            self.result.dropped()
        )
    }
}

/// Runs `scenario` without holding the interpreter lock.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, trace=false))]
fn run(py: Python<'_>, scenario: &Scenario, seed: Option<u64>, trace: bool) -> PyResult<RunReport> {
    let cfg = scenario.cfg.clone();
    let seed = seed.unwrap_or(cfg.seed);
    let opts = RunOptions {
        trace,
        record_checks: false,
    };
    py.detach(move || run_with(&cfg, seed, opts))
        .map(|result| RunReport { result })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn builtin_names() -> Vec<&'static str> {
    chanalloc::BUILTIN_NAMES.to_vec()
}

#[pyfunction]
fn csv_names() -> Vec<&'static str> {
    CSV_FILES.to_vec()
}

#[pyfunction]
fn link_class(mean_lqi: f64) -> &'static str {
    classify_link(mean_lqi).as_str()
}

fn entry(relay: u16, ch: u8, lqi: f64, advertised_ms: f64) -> PyResult<CandidateEntry> {
    Ok(CandidateEntry {
        relay: RelayId(relay),
        channel: channel(ch)?,
        link_class: classify_link(lqi),
        lqi,
        advertised_delay: PathDelayEstimate::new(advertised_ms).map_err(value_err)?,
    })
}

/// Picks from `(relay, channel, lqi, advertised_ms)` tuples; returns
/// `(relay, channel, class)` or `None` for an empty table.
#[pyfunction]
fn select_candidate(entries: Vec<(u16, u8, f64, f64)>) -> PyResult<Option<(u16, u8, &'static str)>> {
    let table: CandidateTable = entries
        .into_iter()
        .map(|(r, c, l, d)| entry(r, c, l, d))
        .collect::<PyResult<_>>()?;
    Ok(select(&table)
        .ok()
        .map(|s| (s.relay.0, s.channel.number(), s.baseline_class.as_str())))
}

/// Exponentially weighted per-node queuing delay.
#[pyclass(module = "pychanalloc", name = "DelayEwma")]
struct PyDelayEwma {
    inner: chanalloc::DelayEwma,
}

#[pymethods]
impl PyDelayEwma {
    #[new]
    #[pyo3(signature = (alpha=None))]
    fn new(alpha: Option<f64>) -> PyResult<Self> {
        let inner = match alpha {
            Some(a) => chanalloc::DelayEwma::with_alpha(a).map_err(value_err)?,
            None => chanalloc::DelayEwma::new(),
        };
        Ok(Self { inner })
    }

    fn update(&mut self, sample_ms: f64) -> PyResult<()> {
        self.inner.update(sample_ms).map_err(value_err)
    }

    #[getter]
    fn value(&self) -> f64 {
        self.inner.value()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn initialized(&self) -> bool {
        self.inner.is_initialized()
    }
}

/// Link and path-delay watchdog for an associated source.
#[pyclass(module = "pychanalloc")]
struct Monitor {
    inner: MonitorState,
}

#[pymethods]
impl Monitor {
    #[new]
    #[pyo3(signature = (relay, channel_number, baseline_delay_ms, baseline_lqi, tau_d=0.9, tau_lqi=0.9,
        delay_requirement_ms=500.0, n_monitor=10, degradation=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        relay: u16,
        channel_number: u8,
        baseline_delay_ms: f64,
        baseline_lqi: f64,
        tau_d: f64,
        tau_lqi: f64,
        delay_requirement_ms: f64,
        n_monitor: usize,
        degradation: bool,
    ) -> PyResult<Self> {
        let sel = Selection {
            relay: RelayId(relay),
            channel: channel(channel_number)?,
            baseline_delay: PathDelayEstimate::new(baseline_delay_ms).map_err(value_err)?,
            baseline_lqi,
            baseline_class: classify_link(baseline_lqi),
        };
        let params = MonitorParams {
            tau_d,
            tau_lqi,
            delay_requirement_ms,
            n_monitor,
            drift_mode: if degradation { DriftMode::Degradation } else { DriftMode::Literal },
        };
        MonitorState::new(&sel, params).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Feeds one overheard frame; returns the reseek reason or `None`.
    fn on_overheard(&mut self, advertised_ms: f64, local: &PyDelayEwma, lqi: f64) -> PyResult<Option<&'static str>> {
        let adv = PathDelayEstimate::new(advertised_ms).map_err(value_err)?;
        Ok(match self.inner.on_overheard(adv, &local.inner, lqi) {
            Decision::Stay => None,
            Decision::Reseek(r) => Some(r.as_str()),
        })
    }

    #[getter]
    fn current_d(&self) -> f64 {
        self.inner.current_d()
    }

    #[getter]
    fn mean_lqi(&self) -> f64 {
        self.inner.mean_lqi()
    }
}

#[pymodule]
fn pychanalloc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<RunReport>()?;
    m.add_class::<PyDelayEwma>()?;
    m.add_class::<Monitor>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_names, m)?)?;
    m.add_function(wrap_pyfunction!(csv_names, m)?)?;
    m.add_function(wrap_pyfunction!(link_class, m)?)?;
    m.add_function(wrap_pyfunction!(select_candidate, m)?)?;
    Ok(())
}
