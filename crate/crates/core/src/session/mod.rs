//! Event-sourced therapy sessions.
//!
//! A [`LiveSession`] is the single writer for one session: every operation
//! validates against current state, appends events and applies them. The
//! same transition function drives [`replay`], so a log read back from disk
//! rebuilds exactly the state the live run held.

mod hub;
mod replay;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{engagement, EngagementWindow};
use crate::domain::{
    eligible_stimuli, next_objective, order_by_interest, CategoryId, Curriculum, DomainError,
    GameType, LevelState, NextObjective, PatientId, PatientProgress, Stimulus, StimulusId,
};
use crate::time::Timestamp;

pub use hub::{HubConfig, PatientCredentials, SessionHub, AUTO_END_AFTER_MS};
pub use replay::{replay, CorruptLog};

macro_rules! opaque_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }
    };
}

opaque_id!(SessionId);
opaque_id!(TherapistId);
opaque_id!(TrialId);

impl SessionId {
    /// Session ids double as log file names.
    pub fn is_well_formed(&self) -> bool {
        !self.0.is_empty()
            && self.0.len() <= 64
            && self.0.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Active,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub patient_id: PatientId,
    pub therapist_id: TherapistId,
    pub started_at: Timestamp,
    pub ended_at: Option<Timestamp>,
    pub state: SessionState,
    /// Set when the session was closed by the stale-session sweep.
    pub auto_ended: bool,
}

impl Session {
    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectiveRef {
    pub category: CategoryId,
    pub level: u8,
}

/// The face of a card as the tablet needs it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Card {
    pub id: StimulusId,
    pub label: String,
    pub image_ref: String,
}

impl From<&Stimulus> for Card {
    fn from(s: &Stimulus) -> Self {
        Card { id: s.id.clone(), label: s.label.clone(), image_ref: s.image_ref.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: TrialId,
    pub objective: ObjectiveRef,
    pub game_type: GameType,
    pub required_correct: u32,
    pub target: Card,
    pub distractors: Vec<Card>,
}

impl TrialSpec {
    pub fn shows(&self, id: &StimulusId) -> bool {
        self.target.id == *id || self.distractors.iter().any(|c| c.id == *id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Correct,
    Incorrect,
    NoResponse,
}

impl Outcome {
    pub fn is_error(self) -> bool {
        !matches!(self, Outcome::Correct)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "CORRECT",
            Outcome::Incorrect => "INCORRECT",
            Outcome::NoResponse => "NO_RESPONSE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub trial_id: TrialId,
    pub outcome: Outcome,
    pub selected: Option<StimulusId>,
    pub latency_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub objective: ObjectiveRef,
    pub required_correct: u32,
    /// Distinct targets answered correctly on the level, now mastered.
    pub mastered: Vec<StimulusId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventPayload {
    SessionStarted { patient_id: PatientId, therapist_id: TherapistId },
    TrialPresented(TrialSpec),
    AnswerRecorded(AnswerRecord),
    ObjectiveCompleted(CompletionRecord),
    SessionEnded { auto_ended: bool },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::SessionStarted { .. } => "SESSION_STARTED",
            EventPayload::TrialPresented(_) => "TRIAL_PRESENTED",
            EventPayload::AnswerRecorded(_) => "ANSWER_RECORDED",
            EventPayload::ObjectiveCompleted(_) => "OBJECTIVE_COMPLETED",
            EventPayload::SessionEnded { .. } => "SESSION_ENDED",
        }
    }
}

/// One append-only log record. Serialized as a single JSON line with the
/// field order `seq, session_id, timestamp, kind, payload`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub session_id: SessionId,
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl SessionEvent {
    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("events always serialize");
        line.push('\n');
        line
    }

    /// Completion and session boundary records are fsynced on append.
    pub fn needs_sync(&self) -> bool {
        matches!(
            self.payload,
            EventPayload::SessionStarted { .. }
                | EventPayload::ObjectiveCompleted(_)
                | EventPayload::SessionEnded { .. }
        )
    }
}

/// Renders a log as JSON lines, one event per line.
pub fn events_to_jsonl(events: &[SessionEvent]) -> String {
    events.iter().map(SessionEvent::to_json_line).collect()
}

/// Parses JSON lines. A final line without a newline terminator is a torn
/// append and is dropped.
pub fn events_from_jsonl(text: &str) -> Result<Vec<SessionEvent>, serde_json::Error> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordResult {
    pub accepted: bool,
    pub objective_completed: bool,
    pub new_correct_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub trials_presented: u32,
    pub trials_answered: u32,
    pub correct: u32,
    pub errors: u32,
    pub no_responses: u32,
    pub objectives_completed: Vec<ObjectiveRef>,
    pub engagement: EngagementWindow,
}

impl SessionSummary {
    pub fn from_events(session_id: &SessionId, events: &[SessionEvent]) -> Self {
        let mut summary = SessionSummary {
            session_id: session_id.clone(),
            trials_presented: 0,
            trials_answered: 0,
            correct: 0,
            errors: 0,
            no_responses: 0,
            objectives_completed: Vec::new(),
            engagement: engagement(events),
        };
        for event in events {
            match &event.payload {
                EventPayload::TrialPresented(_) => summary.trials_presented += 1,
                EventPayload::AnswerRecorded(a) => {
                    summary.trials_answered += 1;
                    match a.outcome {
                        Outcome::Correct => summary.correct += 1,
                        Outcome::Incorrect => summary.errors += 1,
                        Outcome::NoResponse => {
                            summary.errors += 1;
                            summary.no_responses += 1;
                        }
                    }
                }
                EventPayload::ObjectiveCompleted(c) => {
                    summary.objectives_completed.push(c.objective.clone())
                }
                _ => {}
            }
        }
        summary
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("invalid credential")]
    InvalidCredential,
    #[error("patient {0} already has an active session")]
    SessionAlreadyActive(PatientId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session is not active")]
    SessionNotActive,
    #[error("category {0} is complete")]
    CategoryComplete(CategoryId),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("trial {0} was never presented")]
    UnknownTrial(TrialId),
    #[error("trial {0} already answered")]
    DuplicateAnswer(TrialId),
    #[error("timestamp {at} precedes the last event at {last}")]
    TimestampRegression { at: Timestamp, last: Timestamp },
    #[error("stimulus {selected} is not on trial {trial}")]
    InvalidSelection { trial: TrialId, selected: StimulusId },
    #[error("event log storage failed: {0}")]
    Storage(String),
}

impl SessionError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InvalidCredential => "INVALID_CREDENTIAL",
            SessionError::SessionAlreadyActive(_) => "SESSION_ALREADY_ACTIVE",
            SessionError::UnknownSession(_) => "UNKNOWN_SESSION",
            SessionError::SessionNotActive => "SESSION_NOT_ACTIVE",
            SessionError::CategoryComplete(_) => "CATEGORY_COMPLETE",
            SessionError::Domain(DomainError::UnknownCategory(_)) => "UNKNOWN_CATEGORY",
            SessionError::Domain(DomainError::NoLadder(_)) => "NO_LADDER",
            SessionError::Domain(DomainError::UnsupportedCategory(_)) => "UNSUPPORTED_CATEGORY",
            SessionError::Domain(DomainError::PoolExhausted { .. }) => "POOL_EXHAUSTED",
            SessionError::UnknownTrial(_) => "UNKNOWN_TRIAL",
            SessionError::DuplicateAnswer(_) => "DUPLICATE_ANSWER",
            SessionError::TimestampRegression { .. } => "TIMESTAMP_REGRESSION",
            SessionError::InvalidSelection { .. } => "INVALID_SELECTION",
            SessionError::Storage(_) => "STORAGE_FAILURE",
        }
    }
}

/// Options for drawing a trial.
#[derive(Debug, Clone, Default)]
pub struct TrialOptions {
    /// Fixes target and distractor draws. Without it the draw is seeded from
    /// the session id and event position, so it is still reproducible.
    pub seed: Option<u64>,
    /// Interest tags (e.g. "vehicles"); matching cards are preferred as
    /// targets when any are eligible.
    pub interests: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSlot {
    pub spec: TrialSpec,
    pub presented_at: Timestamp,
    pub answered: bool,
}

/// Applies one answer to progress. Returns the completion it triggers.
///
/// Only a CORRECT answer to a trial on the category's current level counts;
/// answers to trials whose level was completed meanwhile are recorded but
/// change nothing.
pub(crate) fn apply_answer(
    progress: &mut PatientProgress,
    spec: &TrialSpec,
    outcome: Outcome,
    at: Timestamp,
) -> Option<CompletionRecord> {
    let category = &spec.objective.category;
    if outcome != Outcome::Correct
        || progress.current_level(category) != LevelState::Level(spec.objective.level)
    {
        return None;
    }
    let state = progress.category_mut(category);
    state.correct_count_at_level += 1;
    state.level_correct_targets.insert(spec.target.id.clone());
    if state.correct_count_at_level < spec.required_correct {
        return None;
    }
    let mastered: Vec<StimulusId> = std::mem::take(&mut state.level_correct_targets).into_iter().collect();
    for id in &mastered {
        state.mastered_stimuli.entry(id.clone()).or_insert(at);
    }
    state.current_level = LevelState::after_completing(spec.objective.level);
    state.correct_count_at_level = 0;
    Some(CompletionRecord {
        objective: spec.objective.clone(),
        required_correct: spec.required_correct,
        mastered,
    })
}

/// Snapshot used to compare a live run against its replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionSnapshot<'a> {
    pub session: &'a Session,
    pub progress: &'a PatientProgress,
    pub trials: &'a BTreeMap<TrialId, TrialSlot>,
    pub events: &'a [SessionEvent],
}

/// Single-writer state machine for one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveSession {
    session: Session,
    progress: PatientProgress,
    events: Vec<SessionEvent>,
    trials: BTreeMap<TrialId, TrialSlot>,
    /// A completion whose record was cut off the end of a recovered log.
    pending_completion: Option<(Timestamp, CompletionRecord)>,
}

impl LiveSession {
    /// Opens a session and appends SESSION_STARTED at seq 0.
    pub fn start(
        session_id: SessionId,
        therapist_id: TherapistId,
        progress: PatientProgress,
        at: Timestamp,
    ) -> Self {
        let session = Session {
            session_id: session_id.clone(),
            patient_id: progress.patient_id,
            therapist_id: therapist_id.clone(),
            started_at: at,
            ended_at: None,
            state: SessionState::Active,
            auto_ended: false,
        };
        let mut live = LiveSession {
            session,
            progress,
            events: Vec::new(),
            trials: BTreeMap::new(),
            pending_completion: None,
        };
        let patient_id = live.session.patient_id;
        live.push(at, EventPayload::SessionStarted { patient_id, therapist_id });
        live
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn progress(&self) -> &PatientProgress {
        &self.progress
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn into_parts(self) -> (Session, PatientProgress, Vec<SessionEvent>) {
        (self.session, self.progress, self.events)
    }

    pub fn snapshot(&self) -> SessionSnapshot<'_> {
        SessionSnapshot {
            session: &self.session,
            progress: &self.progress,
            trials: &self.trials,
            events: &self.events,
        }
    }

    /// Canonical JSON of the full state.
    pub fn canonical_state(&self) -> String {
        serde_json::to_string(&self.snapshot()).expect("state always serializes")
    }

    pub fn last_timestamp(&self) -> Timestamp {
        self.events.last().map_or(self.session.started_at, |e| e.timestamp)
    }

    pub fn trial(&self, trial_id: &TrialId) -> Option<&TrialSpec> {
        self.trials.get(trial_id).map(|slot| &slot.spec)
    }

    pub fn has_pending_completion(&self) -> bool {
        self.pending_completion.is_some()
    }

    fn push(&mut self, at: Timestamp, payload: EventPayload) -> &SessionEvent {
        let event = SessionEvent {
            seq: self.events.len() as u64,
            session_id: self.session.session_id.clone(),
            timestamp: at,
            payload,
        };
        self.events.push(event);
        self.events.last().expect("just pushed")
    }

    /// Writes a completion record lost to a crash before anything else.
    pub fn flush_pending(&mut self) {
        if let Some((at, record)) = self.pending_completion.take() {
            self.push(at, EventPayload::ObjectiveCompleted(record));
        }
    }

    fn check_active(&self) -> Result<(), SessionError> {
        if self.session.is_active() {
            Ok(())
        } else {
            Err(SessionError::SessionNotActive)
        }
    }

    fn check_time(&self, at: Timestamp) -> Result<(), SessionError> {
        let last = self.last_timestamp();
        if at < last {
            Err(SessionError::TimestampRegression { at, last })
        } else {
            Ok(())
        }
    }

    fn derived_seed(&self) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.session.session_id.as_str().as_bytes())
            .chain_update((self.events.len() as u64).to_le_bytes())
            .finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// Draws the next card for the category's lowest incomplete objective.
    pub fn present_trial(
        &mut self,
        curriculum: &Curriculum,
        category: &CategoryId,
        options: &TrialOptions,
        at: Timestamp,
    ) -> Result<TrialSpec, SessionError> {
        self.check_active()?;
        let game_type = curriculum.category(category)?.game_type;
        if !game_type.is_supported() {
            return Err(DomainError::UnsupportedCategory(category.clone()).into());
        }
        let objective = match next_objective(curriculum, &self.progress, category)? {
            NextObjective::Objective(o) => o,
            NextObjective::CategoryComplete => {
                return Err(SessionError::CategoryComplete(category.clone()))
            }
        };
        let eligible = eligible_stimuli(objective, category, &self.progress)?;
        self.check_time(at)?;
        self.flush_pending();

        let seed = options.seed.unwrap_or_else(|| self.derived_seed());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let ordered = order_by_interest(curriculum, &eligible, &options.interests);
        let preferred = ordered
            .iter()
            .take_while(|id| {
                curriculum
                    .stimulus(id)
                    .is_some_and(|s| !s.interest_tags.is_disjoint(&options.interests))
            })
            .count();
        let candidates = if preferred > 0 { &ordered[..preferred] } else { &ordered[..] };
        let target_id = candidates[rng.random_range(0..candidates.len())].clone();

        let deck: Vec<&StimulusId> = curriculum
            .category_deck(category)?
            .iter()
            .filter(|id| **id != target_id)
            .collect();
        let wanted = objective.distractor_count(game_type).min(deck.len());
        let distractors = index::sample(&mut rng, deck.len(), wanted)
            .into_iter()
            .map(|i| card(curriculum, deck[i]))
            .collect();

        let trial_id = TrialId::new(format!("t{}", self.events.len()));
        let spec = TrialSpec {
            trial_id: trial_id.clone(),
            objective: ObjectiveRef { category: category.clone(), level: objective.level },
            game_type,
            required_correct: objective.required_correct,
            target: card(curriculum, &target_id),
            distractors,
        };
        self.trials.insert(
            trial_id,
            TrialSlot { spec: spec.clone(), presented_at: at, answered: false },
        );
        self.push(at, EventPayload::TrialPresented(spec.clone()));
        Ok(spec)
    }

    pub fn record_answer(
        &mut self,
        trial_id: &TrialId,
        outcome: Outcome,
        selected: Option<StimulusId>,
        at: Timestamp,
    ) -> Result<RecordResult, SessionError> {
        self.check_active()?;
        let slot = self
            .trials
            .get(trial_id)
            .ok_or_else(|| SessionError::UnknownTrial(trial_id.clone()))?;
        if slot.answered {
            return Err(SessionError::DuplicateAnswer(trial_id.clone()));
        }
        self.check_time(at)?;
        if let Some(sel) = &selected {
            if !slot.spec.shows(sel) {
                return Err(SessionError::InvalidSelection {
                    trial: trial_id.clone(),
                    selected: sel.clone(),
                });
            }
        }
        self.flush_pending();

        let slot = self.trials.get_mut(trial_id).expect("checked above");
        slot.answered = true;
        let spec = slot.spec.clone();
        let latency_ms = at.millis() - slot.presented_at.millis();
        self.push(
            at,
            EventPayload::AnswerRecorded(AnswerRecord {
                trial_id: trial_id.clone(),
                outcome,
                selected,
                latency_ms,
            }),
        );
        let completion = apply_answer(&mut self.progress, &spec, outcome, at);
        let completed = completion.is_some();
        if let Some(record) = completion {
            self.push(at, EventPayload::ObjectiveCompleted(record));
        }
        let new_correct_count = if completed {
            spec.required_correct
        } else {
            self.progress.category(&spec.objective.category).correct_count_at_level
        };
        Ok(RecordResult { accepted: true, objective_completed: completed, new_correct_count })
    }

    pub fn end(&mut self, at: Timestamp, auto_ended: bool) -> Result<SessionSummary, SessionError> {
        self.check_active()?;
        self.check_time(at)?;
        self.flush_pending();
        self.push(at, EventPayload::SessionEnded { auto_ended });
        self.session.state = SessionState::Ended;
        self.session.ended_at = Some(at);
        self.session.auto_ended = auto_ended;
        Ok(SessionSummary::from_events(&self.session.session_id, &self.events))
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary::from_events(&self.session.session_id, &self.events)
    }
}

fn card(curriculum: &Curriculum, id: &StimulusId) -> Card {
    curriculum.stimulus(id).map(Card::from).unwrap_or_else(|| Card {
        id: id.clone(),
        label: id.to_string(),
        image_ref: String::new(),
    })
}
