//! Metrics computed from session event logs: error rate ψ, engagement time,
//! objective completion counts and the mean/SEM/min/max summaries used to
//! compare categories and cohorts.
//!
//! Everything here is a pure function over immutable log snapshots.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use num_rational::Ratio;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{CategoryId, PatientId, LADDER_LEVELS};
use crate::session::{AnswerRecord, EventPayload, SessionEvent, SessionId, TrialSpec};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("no answers recorded in scope")]
    NoData,
    #[error("objective not completed")]
    NotCompleted,
    #[error("window ends before it starts")]
    BadWindow,
}

impl AnalyticsError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalyticsError::NoData => "NO_DATA",
            AnalyticsError::NotCompleted => "NOT_COMPLETED",
            AnalyticsError::BadWindow => "BAD_WINDOW",
        }
    }
}

/// ψ = errors / correct answers required by the objective.
pub fn psi(errors: u64, required: u64) -> Ratio<u64> {
    assert!(required > 0, "required_correct is always positive");
    Ratio::new(errors, required)
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectiveScope {
    pub patient_id: PatientId,
    pub category: CategoryId,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRate {
    pub psi: Ratio<u64>,
    pub errors: u64,
    pub required: u64,
    pub scope: ObjectiveScope,
}

impl ErrorRate {
    pub fn psi_f64(&self) -> f64 {
        ratio_to_f64(self.psi)
    }
}

impl Serialize for ErrorRate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("ErrorRate", 5)?;
        s.serialize_field("psi", &self.psi_f64())?;
        s.serialize_field("psi_exact", &format!("{}/{}", self.psi.numer(), self.psi.denom()))?;
        s.serialize_field("errors", &self.errors)?;
        s.serialize_field("required", &self.required)?;
        s.serialize_field("scope", &self.scope)?;
        s.end()
    }
}

/// One answered trial, joined with the trial it answers.
#[derive(Debug, Clone, Copy)]
pub struct AnswerView<'a> {
    pub patient_id: PatientId,
    pub session_id: &'a SessionId,
    pub at: Timestamp,
    pub trial: &'a TrialSpec,
    pub answer: &'a AnswerRecord,
}

fn log_patient(log: &[SessionEvent]) -> Option<PatientId> {
    match log.first().map(|e| &e.payload) {
        Some(EventPayload::SessionStarted { patient_id, .. }) => Some(*patient_id),
        _ => None,
    }
}

/// Answers of one log in log order.
pub fn answers(log: &[SessionEvent]) -> Vec<AnswerView<'_>> {
    let Some(patient_id) = log_patient(log) else {
        return Vec::new();
    };
    let mut trials: HashMap<&str, &TrialSpec> = HashMap::new();
    let mut out = Vec::new();
    for event in log {
        match &event.payload {
            EventPayload::TrialPresented(spec) => {
                trials.insert(spec.trial_id.as_str(), spec);
            }
            EventPayload::AnswerRecorded(answer) => {
                if let Some(trial) = trials.get(answer.trial_id.as_str()) {
                    out.push(AnswerView {
                        patient_id,
                        session_id: &event.session_id,
                        at: event.timestamp,
                        trial,
                        answer,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

fn in_scope(view: &AnswerView<'_>, patient: PatientId, category: &CategoryId, level: u8) -> bool {
    view.patient_id == patient
        && view.trial.objective.category == *category
        && view.trial.objective.level == level
}

/// Error rate of one objective. Errors are INCORRECT plus NO_RESPONSE
/// answers to trials of that level.
pub fn error_rate(
    logs: &[Vec<SessionEvent>],
    patient: PatientId,
    category: &CategoryId,
    level: u8,
) -> Result<ErrorRate, AnalyticsError> {
    let mut errors = 0u64;
    let mut required = None;
    for log in logs {
        for view in answers(log).iter().filter(|v| in_scope(v, patient, category, level)) {
            required = Some(u64::from(view.trial.required_correct));
            if view.answer.outcome.is_error() {
                errors += 1;
            }
        }
    }
    let required = required.ok_or(AnalyticsError::NoData)?;
    Ok(ErrorRate {
        psi: psi(errors, required),
        errors,
        required,
        scope: ObjectiveScope { patient_id: patient, category: category.clone(), level },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementWindow {
    pub session_id: Option<SessionId>,
    pub first_answer_at: Option<Timestamp>,
    pub last_answer_at: Option<Timestamp>,
    /// `last − first`; 0 when no answer was recorded.
    pub duration_ms: i64,
    pub present: bool,
}

impl EngagementWindow {
    pub fn duration_seconds(&self) -> Option<f64> {
        self.present.then(|| self.duration_ms as f64 / 1000.0)
    }
}

/// Time actively engaged: from the first to the last recorded answer.
pub fn engagement(log: &[SessionEvent]) -> EngagementWindow {
    let mut first = None;
    let mut last = None;
    for event in log {
        if let EventPayload::AnswerRecorded(_) = event.payload {
            first.get_or_insert(event.timestamp);
            last = Some(event.timestamp);
        }
    }
    let duration_ms = match (first, last) {
        (Some(f), Some(l)) => l.millis() - f.millis(),
        _ => 0,
    };
    EngagementWindow {
        session_id: log.first().map(|e| e.session_id.clone()),
        first_answer_at: first,
        last_answer_at: last,
        duration_ms,
        present: first.is_some(),
    }
}

/// Sample mean with standard error, min and max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1) over √n; 0 when n = 1.
    pub sem: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl AggregateSummary {
    pub const EMPTY: AggregateSummary = AggregateSummary { mean: 0.0, sem: 0.0, min: 0.0, max: 0.0, n: 0 };

    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sem = if n == 1 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / (n as f64).sqrt()
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rounding can push the mean a hair outside [min, max] for equal values
        Some(AggregateSummary { mean: mean.clamp(min, max), sem, min, max, n })
    }
}

/// Half-open time interval `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl TimeWindow {
    pub fn new(from: Timestamp, to: Timestamp) -> Result<Self, AnalyticsError> {
        if from > to {
            return Err(AnalyticsError::BadWindow);
        }
        Ok(TimeWindow { from, to })
    }

    pub const ALL: TimeWindow = TimeWindow { from: Timestamp(i64::MIN), to: Timestamp(i64::MAX) };

    pub fn contains(&self, t: Timestamp) -> bool {
        self.from <= t && t < self.to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionStats {
    pub per_patient: BTreeMap<PatientId, BTreeMap<CategoryId, u32>>,
    pub totals: BTreeMap<PatientId, u32>,
    pub total: u32,
    /// Over per-patient totals across the selected categories.
    pub summary: AggregateSummary,
}

/// Counts OBJECTIVE_COMPLETED events per patient and category inside the
/// window. Completions are attributed to the completion event's timestamp.
pub fn completion_stats(
    logs: &[Vec<SessionEvent>],
    patients: &BTreeSet<PatientId>,
    window: TimeWindow,
    categories: &BTreeSet<CategoryId>,
) -> CompletionStats {
    let mut per_patient: BTreeMap<PatientId, BTreeMap<CategoryId, u32>> = patients
        .iter()
        .map(|p| (*p, categories.iter().map(|c| (c.clone(), 0)).collect()))
        .collect();
    for log in logs {
        let Some(patient) = log_patient(log).filter(|p| patients.contains(p)) else {
            continue;
        };
        for event in log {
            if let EventPayload::ObjectiveCompleted(record) = &event.payload {
                if window.contains(event.timestamp) && categories.contains(&record.objective.category) {
                    *per_patient
                        .entry(patient)
                        .or_default()
                        .entry(record.objective.category.clone())
                        .or_default() += 1;
                }
            }
        }
    }
    let totals: BTreeMap<PatientId, u32> =
        per_patient.iter().map(|(p, cats)| (*p, cats.values().sum())).collect();
    let total = totals.values().sum();
    let values: Vec<f64> = totals.values().map(|t| f64::from(*t)).collect();
    let summary = AggregateSummary::from_values(&values).unwrap_or(AggregateSummary::EMPTY);
    CompletionStats { per_patient, totals, total, summary }
}

/// Denominator for "percentage of objectives completed".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentBase {
    /// Out of the 15 levels of the ladder.
    #[default]
    Ladder,
    /// Out of the levels the patient answered at least one trial of in the window.
    Attempted,
}

/// Mean over patients of the per-category completion percentage.
pub fn completion_percentages(
    logs: &[Vec<SessionEvent>],
    patients: &BTreeSet<PatientId>,
    window: TimeWindow,
    categories: &BTreeSet<CategoryId>,
    base: PercentBase,
) -> BTreeMap<CategoryId, f64> {
    let stats = completion_stats(logs, patients, window, categories);
    let mut attempted: BTreeMap<(PatientId, CategoryId), BTreeSet<u8>> = BTreeMap::new();
    if base == PercentBase::Attempted {
        for log in logs {
            for view in answers(log) {
                if window.contains(view.at) && patients.contains(&view.patient_id) {
                    attempted
                        .entry((view.patient_id, view.trial.objective.category.clone()))
                        .or_default()
                        .insert(view.trial.objective.level);
                }
            }
        }
    }
    categories
        .iter()
        .map(|cat| {
            let shares: Vec<f64> = stats
                .per_patient
                .iter()
                .filter_map(|(p, counts)| {
                    let done = f64::from(counts.get(cat).copied().unwrap_or(0));
                    let denom = match base {
                        PercentBase::Ladder => f64::from(LADDER_LEVELS),
                        PercentBase::Attempted => {
                            attempted.get(&(*p, cat.clone())).map_or(0, |s| s.len()) as f64
                        }
                    };
                    (denom > 0.0).then(|| 100.0 * done / denom)
                })
                .collect();
            let mean = if shares.is_empty() { 0.0 } else { shares.iter().sum::<f64>() / shares.len() as f64 };
            (cat.clone(), mean)
        })
        .collect()
}

/// Levels completed per patient in a category, with the completion time.
fn completed_levels(
    logs: &[Vec<SessionEvent>],
    category: &CategoryId,
) -> BTreeMap<PatientId, BTreeMap<u8, Timestamp>> {
    let mut out: BTreeMap<PatientId, BTreeMap<u8, Timestamp>> = BTreeMap::new();
    for log in logs {
        let Some(patient) = log_patient(log) else { continue };
        for event in log {
            if let EventPayload::ObjectiveCompleted(record) = &event.payload {
                if record.objective.category == *category {
                    out.entry(patient).or_default().insert(record.objective.level, event.timestamp);
                }
            }
        }
    }
    out
}

/// Per-patient ψ for a category: the mean ψ over the patient's completed
/// objectives in that category.
pub fn patient_category_psi(
    logs: &[Vec<SessionEvent>],
    category: &CategoryId,
) -> BTreeMap<PatientId, f64> {
    // (patient, level) -> (errors, required)
    let mut tallies: BTreeMap<(PatientId, u8), (u64, u64)> = BTreeMap::new();
    for log in logs {
        for view in answers(log) {
            if view.trial.objective.category != *category {
                continue;
            }
            let t = tallies
                .entry((view.patient_id, view.trial.objective.level))
                .or_insert((0, u64::from(view.trial.required_correct)));
            if view.answer.outcome.is_error() {
                t.0 += 1;
            }
        }
    }
    completed_levels(logs, category)
        .into_iter()
        .filter_map(|(patient, levels)| {
            let rates: Vec<f64> = levels
                .keys()
                .filter_map(|level| tallies.get(&(patient, *level)))
                .map(|(e, r)| ratio_to_f64(psi(*e, *r)))
                .collect();
            (!rates.is_empty()).then(|| (patient, rates.iter().sum::<f64>() / rates.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryErrorSummary {
    pub category: CategoryId,
    pub per_patient: BTreeMap<PatientId, f64>,
    pub summary: AggregateSummary,
}

/// Mean/SEM/min/max over patients of each patient's mean ψ in the category.
pub fn category_error_summary(
    logs: &[Vec<SessionEvent>],
    category: &CategoryId,
) -> Result<CategoryErrorSummary, AnalyticsError> {
    let per_patient = patient_category_psi(logs, category);
    let values: Vec<f64> = per_patient.values().copied().collect();
    let summary = AggregateSummary::from_values(&values).ok_or(AnalyticsError::NoData)?;
    Ok(CategoryErrorSummary { category: category.clone(), per_patient, summary })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedResponse {
    pub stimulus_label: String,
    pub answered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub correct: u64,
    pub errors: u64,
    /// ψ as an exact fraction, `errors/required` in lowest terms.
    pub psi: String,
}

/// What the family and supervisor receive when an objective is completed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub patient_id: PatientId,
    pub category: CategoryId,
    pub level: u8,
    pub required_correct: u32,
    pub period_start: Timestamp,
    pub period_end: Timestamp,
    pub correct_responses: Vec<ReportedResponse>,
    pub totals: ReportTotals,
}

/// Collects the correct answers that counted toward a completed objective.
pub fn objective_report(
    logs: &[Vec<SessionEvent>],
    patient: PatientId,
    category: &CategoryId,
    level: u8,
) -> Result<ObjectiveReport, AnalyticsError> {
    let mut ordered: Vec<&Vec<SessionEvent>> =
        logs.iter().filter(|l| log_patient(l) == Some(patient)).collect();
    ordered.sort_by_key(|l| l[0].timestamp);

    let mut period_start = None;
    let mut responses = Vec::new();
    let mut completion = None;
    'logs: for log in ordered {
        let mut trials: HashMap<&str, &TrialSpec> = HashMap::new();
        for event in log.iter() {
            match &event.payload {
                EventPayload::TrialPresented(spec) => {
                    if spec.objective.category == *category && spec.objective.level == level {
                        period_start.get_or_insert(event.timestamp);
                    }
                    trials.insert(spec.trial_id.as_str(), spec);
                }
                EventPayload::AnswerRecorded(a) if a.outcome == crate::session::Outcome::Correct => {
                    if let Some(spec) = trials.get(a.trial_id.as_str()) {
                        if spec.objective.category == *category && spec.objective.level == level {
                            responses.push(ReportedResponse {
                                stimulus_label: spec.target.label.clone(),
                                answered_at: event.timestamp,
                            });
                        }
                    }
                }
                EventPayload::ObjectiveCompleted(record)
                    if record.objective.category == *category && record.objective.level == level =>
                {
                    completion = Some((event.timestamp, record.required_correct));
                    break 'logs;
                }
                _ => {}
            }
        }
    }
    let (period_end, required_correct) = completion.ok_or(AnalyticsError::NotCompleted)?;
    let rate = error_rate(logs, patient, category, level)?;
    Ok(ObjectiveReport {
        patient_id: patient,
        category: category.clone(),
        level,
        required_correct,
        period_start: period_start.unwrap_or(period_end),
        period_end,
        correct_responses: responses,
        totals: ReportTotals {
            correct: u64::from(required_correct),
            errors: rate.errors,
            psi: format!("{}/{}", rate.psi.numer(), rate.psi.denom()),
        },
    })
}

/// Everything the dashboard shows for one patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientMetrics {
    pub patient_id: PatientId,
    pub window: TimeWindow,
    pub error_rates: Vec<ErrorRate>,
    pub mean_psi: BTreeMap<CategoryId, f64>,
    pub engagement: Vec<EngagementWindow>,
    pub completions: BTreeMap<CategoryId, u32>,
    pub completion_percent: BTreeMap<CategoryId, f64>,
    pub percent_base: PercentBase,
}

pub fn patient_metrics(
    logs: &[Vec<SessionEvent>],
    patient: PatientId,
    categories: &BTreeSet<CategoryId>,
    window: TimeWindow,
    base: PercentBase,
) -> PatientMetrics {
    let own: Vec<Vec<SessionEvent>> = logs
        .iter()
        .filter(|l| log_patient(l) == Some(patient) && window.contains(l[0].timestamp))
        .cloned()
        .collect();
    let mut scopes = BTreeSet::new();
    for log in &own {
        for view in answers(log) {
            if categories.contains(&view.trial.objective.category) {
                scopes.insert((view.trial.objective.category.clone(), view.trial.objective.level));
            }
        }
    }
    let error_rates = scopes
        .iter()
        .filter_map(|(c, l)| error_rate(&own, patient, c, *l).ok())
        .collect();
    let mean_psi = categories
        .iter()
        .filter_map(|c| patient_category_psi(&own, c).get(&patient).map(|v| (c.clone(), *v)))
        .collect();
    let patients = BTreeSet::from([patient]);
    let stats = completion_stats(&own, &patients, window, categories);
    PatientMetrics {
        patient_id: patient,
        window,
        error_rates,
        mean_psi,
        engagement: own.iter().map(|l| engagement(l)).collect(),
        completions: stats.per_patient.get(&patient).cloned().unwrap_or_default(),
        completion_percent: completion_percentages(&own, &patients, window, categories, base),
        percent_base: base,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_worked_example() {
        assert_eq!(psi(100, 50), Ratio::from_integer(2));
        assert_eq!(psi(0, 20), Ratio::from_integer(0));
        assert_eq!(ratio_to_f64(psi(89, 50)), 1.78);
    }

    #[test]
    fn summary_of_one_two_three() {
        let s = AggregateSummary::from_values(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.sem - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((s.sem - 0.577).abs() < 1e-3);
        assert_eq!((s.min, s.max, s.n), (1.0, 3.0, 3));
    }

    #[test]
    fn summary_single_value_has_zero_sem() {
        let s = AggregateSummary::from_values(&[1.64]).unwrap();
        assert_eq!((s.mean, s.sem, s.min, s.max, s.n), (1.64, 0.0, 1.64, 1.64, 1));
        assert!(AggregateSummary::from_values(&[]).is_none());
    }

    #[test]
    fn engagement_of_empty_log_is_absent() {
        let w = engagement(&[]);
        assert!(!w.present);
        assert_eq!(w.duration_seconds(), None);
    }

    #[test]
    fn window_is_half_open() {
        let w = TimeWindow::new(Timestamp(10), Timestamp(20)).unwrap();
        assert!(w.contains(Timestamp(10)));
        assert!(!w.contains(Timestamp(20)));
        assert_eq!(TimeWindow::new(Timestamp(2), Timestamp(1)), Err(AnalyticsError::BadWindow));
    }
}
