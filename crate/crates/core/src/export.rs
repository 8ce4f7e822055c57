//! De-identified dataset export: three CSV tables keyed by opaque ids.
//!
//! * `sessions.csv`: one row per session log
//! * `answers.csv`: one row per recorded answer, joined with its trial
//! * `completions.csv`: one row per completed objective
//!
//! Only sessions started inside the window are exported. Rows keep log order.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytics::{answers, TimeWindow};
use crate::domain::{CategoryId, GameType, PatientId, StimulusId};
use crate::session::{EventPayload, Outcome, SessionEvent, SessionId, TherapistId, TrialId};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session_id: SessionId,
    pub patient_id: PatientId,
    pub therapist_id: TherapistId,
    pub started_at: Timestamp,
    pub ended_at: Option<Timestamp>,
    pub auto_ended: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub session_id: SessionId,
    pub patient_id: PatientId,
    pub seq: u64,
    pub trial_id: TrialId,
    pub category: CategoryId,
    pub level: u8,
    pub required_correct: u32,
    pub game_type: GameType,
    pub target_id: StimulusId,
    pub target_label: String,
    pub outcome: Outcome,
    pub selected_id: Option<StimulusId>,
    pub latency_ms: i64,
    pub answered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRow {
    pub session_id: SessionId,
    pub patient_id: PatientId,
    pub seq: u64,
    pub category: CategoryId,
    pub level: u8,
    pub required_correct: u32,
    pub completed_at: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub sessions: Vec<SessionRow>,
    pub answers: Vec<AnswerRow>,
    pub completions: Vec<CompletionRow>,
}

/// Builds the tables; `patients` restricts the export when given.
pub fn export_dataset(
    logs: &[Vec<SessionEvent>],
    window: TimeWindow,
    patients: Option<&BTreeSet<PatientId>>,
) -> Dataset {
    let mut out = Dataset::default();
    for log in logs {
        let Some(first) = log.first() else { continue };
        let EventPayload::SessionStarted { patient_id, therapist_id } = &first.payload else {
            continue;
        };
        if !window.contains(first.timestamp) || patients.is_some_and(|p| !p.contains(patient_id)) {
            continue;
        }
        let end = log.iter().find_map(|e| match e.payload {
            EventPayload::SessionEnded { auto_ended } => Some((e.timestamp, auto_ended)),
            _ => None,
        });
        out.sessions.push(SessionRow {
            session_id: first.session_id.clone(),
            patient_id: *patient_id,
            therapist_id: therapist_id.clone(),
            started_at: first.timestamp,
            ended_at: end.map(|e| e.0),
            auto_ended: end.is_some_and(|e| e.1),
        });
        let views = answers(log);
        let seqs = log.iter().filter(|e| matches!(e.payload, EventPayload::AnswerRecorded(_))).map(|e| e.seq);
        for (v, seq) in views.iter().zip(seqs) {
            out.answers.push(AnswerRow {
                session_id: v.session_id.clone(),
                patient_id: v.patient_id,
                seq,
                trial_id: v.trial.trial_id.clone(),
                category: v.trial.objective.category.clone(),
                level: v.trial.objective.level,
                required_correct: v.trial.required_correct,
                game_type: v.trial.game_type,
                target_id: v.trial.target.id.clone(),
                target_label: v.trial.target.label.clone(),
                outcome: v.answer.outcome,
                selected_id: v.answer.selected.clone(),
                latency_ms: v.answer.latency_ms,
                answered_at: v.at,
            });
        }
        for e in log {
            if let EventPayload::ObjectiveCompleted(c) = &e.payload {
                out.completions.push(CompletionRow {
                    session_id: e.session_id.clone(),
                    patient_id: *patient_id,
                    seq: e.seq,
                    category: c.objective.category.clone(),
                    level: c.objective.level,
                    required_correct: c.required_correct,
                    completed_at: e.timestamp,
                });
            }
        }
    }
    out
}

fn table<T: Serialize>(rows: &[T], header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.serialize(row).expect("rows serialize");
    }
    w.into_inner().expect("in-memory writer never fails to flush")
}

pub const SESSION_COLUMNS: [&str; 6] =
    ["session_id", "patient_id", "therapist_id", "started_at", "ended_at", "auto_ended"];
pub const ANSWER_COLUMNS: [&str; 14] = [
    "session_id",
    "patient_id",
    "seq",
    "trial_id",
    "category",
    "level",
    "required_correct",
    "game_type",
    "target_id",
    "target_label",
    "outcome",
    "selected_id",
    "latency_ms",
    "answered_at",
];
pub const COMPLETION_COLUMNS: [&str; 7] =
    ["session_id", "patient_id", "seq", "category", "level", "required_correct", "completed_at"];

impl Dataset {
    /// `(file name, CSV bytes)` for each table.
    pub fn to_csv(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            ("sessions.csv", table(&self.sessions, &SESSION_COLUMNS)),
            ("answers.csv", table(&self.answers, &ANSWER_COLUMNS)),
            ("completions.csv", table(&self.completions, &COMPLETION_COLUMNS)),
        ]
    }
}

pub fn write_export(dataset: &Dataset, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in dataset.to_csv() {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}
