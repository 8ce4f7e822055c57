//! Python module `aba_therapy`.
//!
//! Structured results come back as plain dicts and lists. Session logs are
//! passed around as JSON Lines text, one string per session, the same bytes
//! the server stores.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use aba_core::analytics::{self, PercentBase, TimeWindow};
use aba_core::export::export_dataset;
use aba_core::report::{render_report, ReportFormat};
use aba_core::session::{
    events_from_jsonl, events_to_jsonl, replay, EventPayload, HubConfig, SessionHub as CoreHub, TrialId, TrialOptions,
};
use aba_core::store::EventStore;
use aba_core::synth::{self, CohortPlan, CohortTargets, LadderConfig, SyntheticDataset, SyntheticProfile};
use aba_core::time::{Clock, ManualClock, SystemClock};
use aba_core::{CategoryId, Curriculum as CoreCurriculum, Outcome, PatientId, PatientProgress, SessionEvent, SessionId, Timestamp};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(aba_therapy, AbaError, PyException, "Base class for engine errors; `code` holds the error code.");
create_exception!(aba_therapy, SessionError, AbaError);
create_exception!(aba_therapy, AnalyticsError, AbaError);

fn coded<E: pyo3::PyTypeInfo>(py: Python<'_>, code: &str, message: String) -> PyErr {
    let err = PyErr::new::<E, _>(format!("{code}: {message}"));
    let _ = err.value(py).setattr("code", code);
    err
}

fn session_err(e: aba_core::SessionError) -> PyErr {
    Python::attach(|py| coded::<SessionError>(py, e.code(), e.to_string()))
}

fn analytics_err(e: analytics::AnalyticsError) -> PyErr {
    Python::attach(|py| coded::<AnalyticsError>(py, e.code(), e.to_string()))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Accepts a JSON string or any object `json.dumps` can encode.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.cast::<PyString>() {
        Ok(s) => s.to_str()?.to_owned(),
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_logs(logs: Vec<String>) -> PyResult<Vec<Vec<SessionEvent>>> {
    logs.iter().map(|l| events_from_jsonl(l).map_err(value_err)).collect()
}

fn window(from_ms: Option<i64>, to_ms: Option<i64>) -> PyResult<TimeWindow> {
    TimeWindow::new(from_ms.map_or(TimeWindow::ALL.from, Timestamp), to_ms.map_or(TimeWindow::ALL.to, Timestamp))
        .map_err(analytics_err)
}

fn category_set(categories: Vec<String>) -> BTreeSet<CategoryId> {
    categories.into_iter().map(CategoryId::new).collect()
}

fn outcome(s: &str) -> PyResult<Outcome> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown outcome {s:?}")))
}

/// Category definitions, objective ladders and stimuli.
#[pyclass(frozen, skip_from_py_object, module = "aba_therapy")]
#[derive(Clone)]
struct Curriculum {
    inner: Arc<CoreCurriculum>,
}

#[pymethods]
impl Curriculum {
    /// The 18 categories with generated ladders and cards for the supported ones.
    #[staticmethod]
    #[pyo3(signature = (required_correct=None, pool_extra=None, distractors=None))]
    fn synthetic(required_correct: Option<u32>, pool_extra: Option<u32>, distractors: Option<u32>) -> Self {
        let d = LadderConfig::default();
        let config = LadderConfig {
            required_correct: required_correct.unwrap_or(d.required_correct),
            pool_extra: pool_extra.unwrap_or(d.pool_extra),
            distractors: distractors.unwrap_or(d.distractors),
        };
        Curriculum { inner: Arc::new(synth::synthetic_curriculum(&config)) }
    }

    #[staticmethod]
    fn from_json(text: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Curriculum { inner: Arc::new(from_py(text)?) })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&*self.inner).map_err(value_err)
    }

    fn categories(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.categories().collect::<Vec<_>>())
    }

    fn ladder(&self, py: Python<'_>, category: &str) -> PyResult<Py<PyAny>> {
        let ladder = self.inner.ladder(&CategoryId::new(category)).map_err(value_err)?;
        to_py(py, ladder)
    }

    fn stimulus(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.stimulus(&id.into()))
    }

    fn __repr__(&self) -> String {
        format!("Curriculum({} categories, {} stimuli)", self.inner.categories().count(), self.inner.stimuli().count())
    }
}

/// Live sessions for many patients. Persists to `data_dir/sessions` when a
/// data directory is given and recovers what is already there.
#[pyclass(frozen, module = "aba_therapy")]
struct SessionHub {
    hub: CoreHub,
    manual: Option<Arc<ManualClock>>,
}

#[pymethods]
impl SessionHub {
    /// `clock_ms` pins time to a manual clock moved with `advance`; the
    /// system clock is used otherwise.
    #[new]
    #[pyo3(signature = (curriculum, data_dir=None, clock_ms=None, id_seed=None, auto_end_after_ms=None))]
    fn new(
        curriculum: &Curriculum,
        data_dir: Option<PathBuf>,
        clock_ms: Option<i64>,
        id_seed: Option<u64>,
        auto_end_after_ms: Option<i64>,
    ) -> PyResult<Self> {
        let manual = clock_ms.map(|t| Arc::new(ManualClock::new(Timestamp(t))));
        let clock: Arc<dyn Clock> = match &manual {
            Some(m) => m.clone(),
            None => Arc::new(SystemClock),
        };
        let config = HubConfig { auto_end_after_ms: auto_end_after_ms.unwrap_or(HubConfig::default().auto_end_after_ms), id_seed };
        let hub = match data_dir {
            Some(dir) => {
                let store = EventStore::open(dir.join("sessions")).map_err(value_err)?;
                CoreHub::recover(curriculum.inner.clone(), clock, store, config).map_err(session_err)?
            }
            None => CoreHub::new(curriculum.inner.clone(), clock, None, config),
        };
        Ok(SessionHub { hub, manual })
    }

    fn now_ms(&self) -> i64 {
        self.hub.now().0
    }

    /// Moves the manual clock forward and returns the new time.
    fn advance(&self, ms: i64) -> PyResult<i64> {
        match &self.manual {
            Some(c) => Ok(c.advance(ms).0),
            None => Err(PyValueError::new_err("hub runs on the system clock")),
        }
    }

    fn start_session(&self, py: Python<'_>, patient_id: u64, therapist_id: &str) -> PyResult<Py<PyAny>> {
        let s = py.detach(|| self.hub.start_for_patient(PatientId(patient_id), therapist_id.into()));
        to_py(py, &s.map_err(session_err)?)
    }

    #[pyo3(signature = (session_id, category, seed=None, interests=Vec::new()))]
    fn present_trial(
        &self,
        py: Python<'_>,
        session_id: &str,
        category: &str,
        seed: Option<u64>,
        interests: Vec<String>,
    ) -> PyResult<Py<PyAny>> {
        let options = TrialOptions { seed, interests: interests.into_iter().collect() };
        let t = py.detach(|| self.hub.present_trial(&SessionId::new(session_id), &CategoryId::new(category), &options));
        to_py(py, &t.map_err(session_err)?)
    }

    /// `outcome` is CORRECT, INCORRECT or NO_RESPONSE.
    #[pyo3(signature = (session_id, trial_id, outcome, selected=None))]
    fn record_answer(
        &self,
        py: Python<'_>,
        session_id: &str,
        trial_id: &str,
        outcome: &str,
        selected: Option<String>,
    ) -> PyResult<Py<PyAny>> {
        let outcome = self::outcome(outcome)?;
        let r = py.detach(|| {
            self.hub.record_answer(&SessionId::new(session_id), &TrialId::new(trial_id), outcome, selected.map(aba_core::StimulusId::new))
        });
        to_py(py, &r.map_err(session_err)?)
    }

    fn end_session(&self, py: Python<'_>, session_id: &str) -> PyResult<Py<PyAny>> {
        let s = py.detach(|| self.hub.end_session(&SessionId::new(session_id)));
        to_py(py, &s.map_err(session_err)?)
    }

    /// Auto-ends sessions open longer than the limit; returns their ids.
    fn sweep_stale(&self) -> Vec<String> {
        self.hub.sweep_stale().into_iter().map(|id| id.0).collect()
    }

    fn session(&self, py: Python<'_>, session_id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.hub.session(&SessionId::new(session_id)))
    }

    fn active_session(&self, patient_id: u64) -> Option<String> {
        self.hub.active_session(PatientId(patient_id)).map(|id| id.0)
    }

    fn progress(&self, py: Python<'_>, patient_id: u64) -> PyResult<Py<PyAny>> {
        to_py(py, &self.hub.progress(PatientId(patient_id)))
    }

    /// The session's log as JSON Lines.
    fn events(&self, session_id: &str) -> Option<String> {
        self.hub.events(&SessionId::new(session_id)).map(|e| events_to_jsonl(&e))
    }

    fn logs(&self) -> Vec<String> {
        self.hub.all_logs().iter().map(|l| events_to_jsonl(l)).collect()
    }

    fn patients(&self) -> Vec<u64> {
        self.hub.patients().into_iter().map(|p| p.0).collect()
    }
}

/// Exact error rate as `(numerator, denominator)` in lowest terms.
#[pyfunction]
fn psi(errors: u64, required: u64) -> PyResult<(u64, u64)> {
    if required == 0 {
        return Err(PyValueError::new_err("required must be positive"));
    }
    let r = analytics::psi(errors, required);
    Ok((*r.numer(), *r.denom()))
}

/// Mean, SEM, min, max and n of the values; None when empty.
#[pyfunction]
fn summarize(py: Python<'_>, values: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &analytics::AggregateSummary::from_values(&values))
}

#[pyfunction]
fn error_rate(py: Python<'_>, logs: Vec<String>, patient_id: u64, category: &str, level: u8) -> PyResult<Py<PyAny>> {
    let r = analytics::error_rate(&parse_logs(logs)?, PatientId(patient_id), &CategoryId::new(category), level);
    to_py(py, &r.map_err(analytics_err)?)
}

#[pyfunction]
#[pyo3(signature = (logs, patient_id, categories, from_ms=None, to_ms=None, percent_base="ladder"))]
fn patient_metrics(
    py: Python<'_>,
    logs: Vec<String>,
    patient_id: u64,
    categories: Vec<String>,
    from_ms: Option<i64>,
    to_ms: Option<i64>,
    percent_base: &str,
) -> PyResult<Py<PyAny>> {
    let base: PercentBase = serde_json::from_value(serde_json::Value::String(percent_base.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown percent base {percent_base:?}")))?;
    let m = analytics::patient_metrics(
        &parse_logs(logs)?,
        PatientId(patient_id),
        &category_set(categories),
        window(from_ms, to_ms)?,
        base,
    );
    to_py(py, &m)
}

#[pyfunction]
#[pyo3(signature = (logs, patients, categories, from_ms=None, to_ms=None))]
fn completion_stats(
    py: Python<'_>,
    logs: Vec<String>,
    patients: Vec<u64>,
    categories: Vec<String>,
    from_ms: Option<i64>,
    to_ms: Option<i64>,
) -> PyResult<Py<PyAny>> {
    let patients: BTreeSet<PatientId> = patients.into_iter().map(PatientId).collect();
    let s = analytics::completion_stats(&parse_logs(logs)?, &patients, window(from_ms, to_ms)?, &category_set(categories));
    to_py(py, &s)
}

#[pyfunction]
fn category_error_summary(py: Python<'_>, logs: Vec<String>, category: &str) -> PyResult<Py<PyAny>> {
    let s = analytics::category_error_summary(&parse_logs(logs)?, &CategoryId::new(category));
    to_py(py, &s.map_err(analytics_err)?)
}

/// Session start, end and duration in seconds.
#[pyfunction]
fn engagement(py: Python<'_>, log: &str) -> PyResult<Py<PyAny>> {
    let events = events_from_jsonl(log).map_err(value_err)?;
    let e = analytics::engagement(&events);
    let mut v = serde_json::to_value(&e).map_err(value_err)?;
    v["duration_seconds"] = serde_json::json!(e.duration_seconds());
    to_py(py, &v)
}

/// Report for a completed objective, rendered as CSV or HTML text.
#[pyfunction]
#[pyo3(signature = (logs, patient_id, category, level, format="csv"))]
fn objective_report(
    logs: Vec<String>,
    patient_id: u64,
    category: &str,
    level: u8,
    format: &str,
) -> PyResult<String> {
    let format: ReportFormat = format.parse().map_err(value_err)?;
    let report = analytics::objective_report(&parse_logs(logs)?, PatientId(patient_id), &CategoryId::new(category), level)
        .map_err(analytics_err)?;
    String::from_utf8(render_report(&report, format)).map_err(value_err)
}

/// Replays every log in start order and returns each patient's progress.
/// Raises ValueError naming the first corrupt log.
#[pyfunction]
fn replay_logs(py: Python<'_>, logs: Vec<String>) -> PyResult<Py<PyAny>> {
    let mut logs = parse_logs(logs)?;
    logs.retain(|l| !l.is_empty());
    logs.sort_by(|a, b| (a[0].timestamp, &a[0].session_id).cmp(&(b[0].timestamp, &b[0].session_id)));
    let mut progress: BTreeMap<PatientId, PatientProgress> = BTreeMap::new();
    for log in &logs {
        let EventPayload::SessionStarted { patient_id, .. } = &log[0].payload else {
            return Err(PyValueError::new_err(format!("{}: first event is not SESSION_STARTED", log[0].session_id)));
        };
        let base = progress.entry(*patient_id).or_insert_with(|| PatientProgress::new(*patient_id));
        let live = replay(log, base).map_err(|e| PyValueError::new_err(format!("{}: {e}", log[0].session_id)))?;
        *base = live.progress().clone();
    }
    to_py(py, &progress.into_values().collect::<Vec<_>>())
}

/// `{"sessions.csv": ..., "answers.csv": ..., "completions.csv": ...}`.
#[pyfunction]
#[pyo3(signature = (logs, patients=None, from_ms=None, to_ms=None))]
fn export_csv(
    logs: Vec<String>,
    patients: Option<Vec<u64>>,
    from_ms: Option<i64>,
    to_ms: Option<i64>,
) -> PyResult<BTreeMap<String, String>> {
    let patients: Option<BTreeSet<PatientId>> = patients.map(|p| p.into_iter().map(PatientId).collect());
    let data = export_dataset(&parse_logs(logs)?, window(from_ms, to_ms)?, patients.as_ref());
    data.to_csv()
        .into_iter()
        .map(|(name, bytes)| Ok((name.to_owned(), String::from_utf8(bytes).map_err(value_err)?)))
        .collect()
}

fn dataset(py: Python<'_>, data: SyntheticDataset) -> PyResult<Py<PyAny>> {
    let v = serde_json::json!({
        "curriculum": data.curriculum,
        "logs": data.logs.iter().map(|l| events_to_jsonl(l)).collect::<Vec<_>>(),
        "sha256": data.digest(),
    });
    to_py(py, &v)
}

/// Simulated sessions for a behaviour profile. Returns
/// `{"curriculum", "logs", "sha256"}`.
#[pyfunction]
#[pyo3(signature = (profile, ladder=None))]
fn generate_sessions(py: Python<'_>, profile: &Bound<'_, PyAny>, ladder: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let profile: SyntheticProfile = from_py(profile)?;
    let ladder: LadderConfig = ladder.map(from_py).transpose()?.unwrap_or_default();
    let data = py.detach(|| synth::generate_sessions(&profile, &ladder)).map_err(value_err)?;
    dataset(py, data)
}

#[pyfunction]
fn solve_cohort(py: Python<'_>, targets: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let targets: CohortTargets = from_py(targets)?;
    let plan = py.detach(|| synth::solve_cohort(&targets)).map_err(value_err)?;
    to_py(py, &plan)
}

#[pyfunction]
fn generate_cohort(py: Python<'_>, plan: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let plan: CohortPlan = from_py(plan)?;
    let data = py.detach(|| synth::generate_cohort(&plan)).map_err(value_err)?;
    dataset(py, data)
}

#[pymodule]
fn aba_therapy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("AbaError", py.get_type::<AbaError>())?;
    m.add("SessionError", py.get_type::<SessionError>())?;
    m.add("AnalyticsError", py.get_type::<AnalyticsError>())?;
    m.add_class::<Curriculum>()?;
    m.add_class::<SessionHub>()?;
    m.add_function(wrap_pyfunction!(psi, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(patient_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(completion_stats, m)?)?;
    m.add_function(wrap_pyfunction!(category_error_summary, m)?)?;
    m.add_function(wrap_pyfunction!(engagement, m)?)?;
    m.add_function(wrap_pyfunction!(objective_report, m)?)?;
    m.add_function(wrap_pyfunction!(replay_logs, m)?)?;
    m.add_function(wrap_pyfunction!(export_csv, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sessions, m)?)?;
    m.add_function(wrap_pyfunction!(solve_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    Ok(())
}
