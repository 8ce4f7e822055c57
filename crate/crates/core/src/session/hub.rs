use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    replay, LiveSession, Outcome, RecordResult, Session, SessionError, SessionEvent, SessionId,
    SessionSummary, TherapistId, TrialId, TrialOptions, TrialSpec,
};
use crate::domain::{CategoryId, Curriculum, PatientId, PatientProgress, StimulusId};
use crate::store::{EventStore, StoreError};
use crate::time::{Clock, Timestamp};

/// Sessions left open longer than this are closed by [`SessionHub::sweep_stale`].
pub const AUTO_END_AFTER_MS: i64 = 12 * 60 * 60 * 1000;

/// Maps a patient credential presented at session start to the patient.
pub trait PatientCredentials {
    fn resolve_patient(&self, token: &str) -> Option<PatientId>;
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub auto_end_after_ms: i64,
    /// Seeds session id generation; ids come from the OS otherwise.
    pub id_seed: Option<u64>,
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig { auto_end_after_ms: AUTO_END_AFTER_MS, id_seed: None }
    }
}

type Handle = Arc<Mutex<LiveSession>>;

#[derive(Default)]
struct HubState {
    /// Progress as of each patient's last ended session.
    settled: HashMap<PatientId, PatientProgress>,
    active: HashMap<PatientId, SessionId>,
    sessions: HashMap<SessionId, Handle>,
    /// Sessions per patient in start order.
    history: BTreeMap<PatientId, Vec<SessionId>>,
}

/// Owns every session of a deployment. Operations on one session are
/// serialized by that session's lock; different sessions never contend
/// beyond a short registry lookup.
pub struct SessionHub {
    curriculum: RwLock<Arc<Curriculum>>,
    clock: Arc<dyn Clock>,
    store: Option<EventStore>,
    config: HubConfig,
    state: Mutex<HubState>,
    ids: Mutex<ChaCha8Rng>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn storage(e: StoreError) -> SessionError {
    SessionError::Storage(e.to_string())
}

impl SessionHub {
    pub fn new(
        curriculum: Arc<Curriculum>,
        clock: Arc<dyn Clock>,
        store: Option<EventStore>,
        config: HubConfig,
    ) -> Self {
        let ids = match config.id_seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_os_rng(),
        };
        SessionHub {
            curriculum: RwLock::new(curriculum),
            clock,
            store,
            config,
            state: Mutex::new(HubState::default()),
            ids: Mutex::new(ids),
        }
    }

    /// Rebuilds every patient's progress by replaying the store's logs in
    /// start order. Sessions that never ended become active again.
    pub fn recover(
        curriculum: Arc<Curriculum>,
        clock: Arc<dyn Clock>,
        store: EventStore,
        config: HubConfig,
    ) -> Result<Self, SessionError> {
        let mut logs = store.read_all().map_err(storage)?;
        logs.retain(|(_, events)| !events.is_empty());
        logs.sort_by(|(a_id, a), (b_id, b)| (a[0].timestamp, a_id).cmp(&(b[0].timestamp, b_id)));

        let hub = SessionHub::new(curriculum, clock, Some(store.clone()), config);
        {
            let mut state = lock(&hub.state);
            for (id, events) in logs {
                let patient = match &events[0].payload {
                    super::EventPayload::SessionStarted { patient_id, .. } => *patient_id,
                    _ => {
                        return Err(SessionError::Storage(format!(
                            "log {id} does not begin with SESSION_STARTED"
                        )))
                    }
                };
                if let Some(open) = state.active.get(&patient) {
                    return Err(SessionError::Storage(format!(
                        "patient {patient} has unfinished session {open} followed by {id}"
                    )));
                }
                let base = state
                    .settled
                    .get(&patient)
                    .cloned()
                    .unwrap_or_else(|| PatientProgress::new(patient));
                store.repair(&id).map_err(storage)?;
                let mut live = replay(&events, &base)
                    .map_err(|e| SessionError::Storage(format!("log {id}: {e}")))?;
                if live.has_pending_completion() {
                    let before = live.events().len();
                    live.flush_pending();
                    store.append(&live.events()[before..]).map_err(storage)?;
                }
                if live.session().is_active() {
                    state.active.insert(patient, id.clone());
                } else {
                    state.settled.insert(patient, live.progress().clone());
                }
                state.history.entry(patient).or_default().push(id.clone());
                state.sessions.insert(id, Arc::new(Mutex::new(live)));
            }
        }
        Ok(hub)
    }

    pub fn curriculum(&self) -> Arc<Curriculum> {
        self.curriculum.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn set_curriculum(&self, curriculum: Arc<Curriculum>) {
        *self.curriculum.write().unwrap_or_else(|p| p.into_inner()) = curriculum;
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn next_session_id(&self, state: &HubState) -> SessionId {
        let mut rng = lock(&self.ids);
        loop {
            let id = SessionId::new(format!("ses-{:016x}", rng.next_u64()));
            if !state.sessions.contains_key(&id) {
                return id;
            }
        }
    }

    /// Starts a session for the patient the token resolves to.
    pub fn start_session(
        &self,
        patient_token: &str,
        credentials: &dyn PatientCredentials,
        therapist_id: TherapistId,
    ) -> Result<Session, SessionError> {
        let patient = credentials
            .resolve_patient(patient_token)
            .ok_or(SessionError::InvalidCredential)?;
        self.start_for_patient(patient, therapist_id)
    }

    pub fn start_for_patient(
        &self,
        patient: PatientId,
        therapist_id: TherapistId,
    ) -> Result<Session, SessionError> {
        let mut state = lock(&self.state);
        if state.active.contains_key(&patient) {
            return Err(SessionError::SessionAlreadyActive(patient));
        }
        let id = self.next_session_id(&state);
        let base = state
            .settled
            .get(&patient)
            .cloned()
            .unwrap_or_else(|| PatientProgress::new(patient));
        let live = LiveSession::start(id.clone(), therapist_id, base, self.clock.now());
        if let Some(store) = &self.store {
            store.append(live.events()).map_err(storage)?;
        }
        let session = live.session().clone();
        state.active.insert(patient, id.clone());
        state.history.entry(patient).or_default().push(id.clone());
        state.sessions.insert(id, Arc::new(Mutex::new(live)));
        Ok(session)
    }

    fn handle(&self, id: &SessionId) -> Result<Handle, SessionError> {
        lock(&self.state)
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.clone()))
    }

    /// Runs one operation under the session lock, persists the events it
    /// appended and rolls the session back if persistence fails.
    fn apply<T>(
        &self,
        id: &SessionId,
        op: impl FnOnce(&mut LiveSession) -> Result<T, SessionError>,
    ) -> Result<T, SessionError> {
        let handle = self.handle(id)?;
        let mut live = lock(&handle);
        let before = live.events().len();
        let backup = self.store.as_ref().map(|_| live.clone());
        let out = op(&mut live)?;
        if let (Some(store), Some(backup)) = (&self.store, backup) {
            if let Err(e) = store.append(&live.events()[before..]) {
                *live = backup;
                return Err(storage(e));
            }
        }
        if !live.session().is_active() {
            let patient = live.session().patient_id;
            let mut state = lock(&self.state);
            if state.active.get(&patient) == Some(id) {
                state.active.remove(&patient);
                state.settled.insert(patient, live.progress().clone());
            }
        }
        Ok(out)
    }

    pub fn present_trial(
        &self,
        id: &SessionId,
        category: &CategoryId,
        options: &TrialOptions,
    ) -> Result<TrialSpec, SessionError> {
        let curriculum = self.curriculum();
        let at = self.clock.now();
        self.apply(id, |live| live.present_trial(&curriculum, category, options, at))
    }

    pub fn record_answer(
        &self,
        id: &SessionId,
        trial_id: &TrialId,
        outcome: Outcome,
        selected: Option<StimulusId>,
    ) -> Result<RecordResult, SessionError> {
        let at = self.clock.now();
        self.record_answer_at(id, trial_id, outcome, selected, at)
    }

    pub fn record_answer_at(
        &self,
        id: &SessionId,
        trial_id: &TrialId,
        outcome: Outcome,
        selected: Option<StimulusId>,
        at: Timestamp,
    ) -> Result<RecordResult, SessionError> {
        self.apply(id, |live| live.record_answer(trial_id, outcome, selected, at))
    }

    pub fn end_session(&self, id: &SessionId) -> Result<SessionSummary, SessionError> {
        let at = self.clock.now();
        self.apply(id, |live| live.end(at, false))
    }

    /// Auto-ends sessions that have been open longer than the configured
    /// limit and returns their ids.
    pub fn sweep_stale(&self) -> Vec<SessionId> {
        let now = self.clock.now();
        let active: Vec<SessionId> = lock(&self.state).active.values().cloned().collect();
        let mut ended = Vec::new();
        for id in active {
            let stale = self.handle(&id).is_ok_and(|h| {
                let live = lock(&h);
                now.millis() - live.session().started_at.millis() > self.config.auto_end_after_ms
            });
            if stale && self.apply(&id, |live| live.end(now.max(live.last_timestamp()), true)).is_ok() {
                ended.push(id);
            }
        }
        ended
    }

    pub fn session(&self, id: &SessionId) -> Option<Session> {
        let handle = self.handle(id).ok()?;
        let live = lock(&handle);
        Some(live.session().clone())
    }

    pub fn events(&self, id: &SessionId) -> Option<Vec<SessionEvent>> {
        let handle = self.handle(id).ok()?;
        let live = lock(&handle);
        Some(live.events().to_vec())
    }

    pub fn active_session(&self, patient: PatientId) -> Option<SessionId> {
        lock(&self.state).active.get(&patient).cloned()
    }

    /// Current progress, including the active session's effects.
    pub fn progress(&self, patient: PatientId) -> PatientProgress {
        let (active, settled) = {
            let state = lock(&self.state);
            let active = state.active.get(&patient).and_then(|id| state.sessions.get(id).cloned());
            (active, state.settled.get(&patient).cloned())
        };
        if let Some(handle) = active {
            return lock(&handle).progress().clone();
        }
        settled.unwrap_or_else(|| PatientProgress::new(patient))
    }

    /// Every log of a patient, in session start order.
    pub fn logs_for_patient(&self, patient: PatientId) -> Vec<Vec<SessionEvent>> {
        let handles: Vec<Handle> = {
            let state = lock(&self.state);
            state
                .history
                .get(&patient)
                .map(|ids| ids.iter().filter_map(|id| state.sessions.get(id).cloned()).collect())
                .unwrap_or_default()
        };
        handles.iter().map(|h| lock(h).events().to_vec()).collect()
    }

    pub fn patients(&self) -> Vec<PatientId> {
        lock(&self.state).history.keys().copied().collect()
    }

    pub fn all_logs(&self) -> Vec<Vec<SessionEvent>> {
        self.patients().into_iter().flat_map(|p| self.logs_for_patient(p)).collect()
    }
}
