use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{
    apply_answer, EventPayload, LiveSession, Session, SessionEvent, SessionState, TrialSlot,
};
use crate::domain::{LevelState, PatientProgress};

/// A log that breaks an event invariant, with the first offending seq.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("CORRUPT_LOG at seq {seq}: {reason}")]
pub struct CorruptLog {
    pub seq: u64,
    pub reason: String,
}

impl CorruptLog {
    pub fn code(&self) -> &'static str {
        "CORRUPT_LOG"
    }
}

fn corrupt(seq: u64, reason: impl Into<String>) -> CorruptLog {
    CorruptLog { seq, reason: reason.into() }
}

/// Rebuilds a session from its log on top of the patient's progress before
/// the session began.
///
/// The result is identical to the live session that emitted the log. A log
/// truncated at any event boundary replays to the corresponding intermediate
/// state; if the cut fell between an answer and the completion it caused, the
/// completion is applied and its record is written on the next append.
pub fn replay(events: &[SessionEvent], base: &PatientProgress) -> Result<LiveSession, CorruptLog> {
    let first = events.first().ok_or_else(|| corrupt(0, "empty log: missing SESSION_STARTED"))?;
    if first.seq != 0 {
        return Err(corrupt(first.seq, "log does not start at seq 0"));
    }
    let EventPayload::SessionStarted { patient_id, therapist_id } = &first.payload else {
        return Err(corrupt(0, "first event is not SESSION_STARTED"));
    };
    if *patient_id != base.patient_id {
        return Err(corrupt(0, "log belongs to a different patient"));
    }

    let mut live = LiveSession {
        session: Session {
            session_id: first.session_id.clone(),
            patient_id: *patient_id,
            therapist_id: therapist_id.clone(),
            started_at: first.timestamp,
            ended_at: None,
            state: SessionState::Active,
            auto_ended: false,
        },
        progress: base.clone(),
        events: vec![first.clone()],
        trials: BTreeMap::new(),
        pending_completion: None,
    };

    for (i, event) in events.iter().enumerate().skip(1) {
        let seq = event.seq;
        if seq != i as u64 {
            return Err(corrupt(seq, format!("expected seq {i}")));
        }
        if event.session_id != live.session.session_id {
            return Err(corrupt(seq, "session id changes mid-log"));
        }
        if event.timestamp < live.last_timestamp() {
            return Err(corrupt(seq, "timestamp regression"));
        }
        if !live.session.is_active() {
            return Err(corrupt(seq, "event after SESSION_ENDED"));
        }
        let pending = live.pending_completion.take();
        match (&event.payload, pending) {
            (EventPayload::ObjectiveCompleted(record), Some((_, expected))) => {
                if *record != expected {
                    return Err(corrupt(seq, "completion record does not match the counted answers"));
                }
            }
            (EventPayload::ObjectiveCompleted(_), None) => {
                return Err(corrupt(seq, "OBJECTIVE_COMPLETED without a completing answer"));
            }
            (_, Some(_)) => {
                return Err(corrupt(seq, "completing answer not followed by OBJECTIVE_COMPLETED"));
            }
            (EventPayload::SessionStarted { .. }, None) => {
                return Err(corrupt(seq, "second SESSION_STARTED"));
            }
            (EventPayload::TrialPresented(spec), None) => {
                if live.trials.contains_key(&spec.trial_id) {
                    return Err(corrupt(seq, format!("trial {} presented twice", spec.trial_id)));
                }
                let category = &spec.objective.category;
                if live.progress.current_level(category) != LevelState::Level(spec.objective.level) {
                    return Err(corrupt(seq, "trial presented out of ladder order"));
                }
                if live.progress.is_mastered(category, &spec.target.id) {
                    return Err(corrupt(seq, "trial target already mastered"));
                }
                let mut seen = BTreeSet::new();
                seen.insert(&spec.target.id);
                if !spec.distractors.iter().all(|d| seen.insert(&d.id)) {
                    return Err(corrupt(seq, "target repeated among distractors"));
                }
                if spec.required_correct == 0 {
                    return Err(corrupt(seq, "objective with required_correct 0"));
                }
                live.trials.insert(
                    spec.trial_id.clone(),
                    TrialSlot { spec: spec.clone(), presented_at: event.timestamp, answered: false },
                );
            }
            (EventPayload::AnswerRecorded(answer), None) => {
                let Some(slot) = live.trials.get_mut(&answer.trial_id) else {
                    return Err(corrupt(seq, format!("answer to unknown trial {}", answer.trial_id)));
                };
                if slot.answered {
                    return Err(corrupt(seq, format!("trial {} answered twice", answer.trial_id)));
                }
                if answer.latency_ms != event.timestamp.millis() - slot.presented_at.millis() {
                    return Err(corrupt(seq, "latency disagrees with timestamps"));
                }
                if let Some(sel) = &answer.selected {
                    if !slot.spec.shows(sel) {
                        return Err(corrupt(seq, "selected card is not on the trial"));
                    }
                }
                slot.answered = true;
                let spec = slot.spec.clone();
                if let Some(record) =
                    apply_answer(&mut live.progress, &spec, answer.outcome, event.timestamp)
                {
                    live.pending_completion = Some((event.timestamp, record));
                }
            }
            (EventPayload::SessionEnded { auto_ended }, None) => {
                live.session.state = SessionState::Ended;
                live.session.ended_at = Some(event.timestamp);
                live.session.auto_ended = *auto_ended;
            }
        }
        live.events.push(event.clone());
    }
    Ok(live)
}
