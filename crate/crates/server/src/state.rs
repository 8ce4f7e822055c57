use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use aba_core::access::{AuditLog, CredentialStore};
use aba_core::deck::DeckStore;
use aba_core::session::{HubConfig, RecordResult, SessionHub};
use aba_core::store::EventStore;
use aba_core::synth::{synthetic_curriculum, LadderConfig};
use aba_core::time::Clock;
use aba_core::{Curriculum, SessionId};
use thiserror::Error;

use crate::config::Config;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("data directory {path}: {reason}")]
    DataDir { path: PathBuf, reason: String },
    #[error("curriculum {path}: {reason}")]
    Curriculum { path: PathBuf, reason: String },
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server stopped: {0}")]
    Serve(std::io::Error),
}

pub struct AppState {
    pub config: Config,
    pub hub: SessionHub,
    pub credentials: CredentialStore,
    pub audit: AuditLog,
    pub decks: DeckStore,
    pub idempotency: Idempotency,
}

fn data_dir_error(path: PathBuf, e: impl ToString) -> StartupError {
    StartupError::DataDir { path, reason: e.to_string() }
}

impl AppState {
    /// Opens the data directory, replays every stored session and loads
    /// registered decks.
    pub fn open(config: Config, clock: Arc<dyn Clock>) -> Result<Arc<Self>, StartupError> {
        std::fs::create_dir_all(&config.data_dir).map_err(|e| data_dir_error(config.data_dir.clone(), e))?;
        std::fs::create_dir_all(config.assets_dir()).map_err(|e| data_dir_error(config.assets_dir(), e))?;
        let mut curriculum = match &config.curriculum {
            Some(path) => load_curriculum(path)?,
            None => synthetic_curriculum(&LadderConfig::default()),
        };
        let decks = DeckStore::open(config.decks_dir()).map_err(|e| data_dir_error(config.decks_dir(), e))?;
        for deck in decks.list().map_err(|e| data_dir_error(config.decks_dir(), e))? {
            curriculum.register_stimuli(deck.stimuli());
        }
        let store = EventStore::open(config.sessions_dir()).map_err(|e| data_dir_error(config.sessions_dir(), e))?;
        let hub_config = HubConfig {
            auto_end_after_ms: (config.auto_end_after_secs as i64).saturating_mul(1000),
            id_seed: None,
        };
        let hub = SessionHub::recover(Arc::new(curriculum), clock.clone(), store, hub_config)
            .map_err(|e| data_dir_error(config.sessions_dir(), e))?;
        let audit = AuditLog::open(&config.audit_path()).map_err(|e| data_dir_error(config.audit_path(), e))?;
        let credentials = CredentialStore::new(config.pepper.as_bytes(), config.accounts.clone(), clock);
        let idempotency = Idempotency::new(config.idempotency_capacity);
        Ok(Arc::new(AppState { config, hub, credentials, audit, decks, idempotency }))
    }
}

fn load_curriculum(path: &PathBuf) -> Result<Curriculum, StartupError> {
    let err = |reason: String| StartupError::Curriculum { path: path.clone(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// A remembered answer response, keyed by session and client key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remembered {
    pub fingerprint: String,
    pub result: RecordResult,
}

#[derive(Default)]
struct IdemInner {
    entries: HashMap<(SessionId, String), Remembered>,
    order: VecDeque<(SessionId, String)>,
}

/// Bounded memory of answer responses plus one async lock per session, so
/// concurrent retries of the same answer run one after the other.
pub struct Idempotency {
    capacity: usize,
    inner: Mutex<IdemInner>,
    locks: Mutex<HashMap<SessionId, Arc<tokio::sync::Mutex<()>>>>,
}

impl Idempotency {
    pub fn new(capacity: usize) -> Self {
        Idempotency { capacity, inner: Mutex::default(), locks: Mutex::default() }
    }

    pub fn session_lock(&self, id: &SessionId) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.clone()).or_default().clone()
    }

    pub fn forget_session(&self, id: &SessionId) {
        self.locks.lock().unwrap_or_else(|p| p.into_inner()).remove(id);
    }

    pub fn get(&self, id: &SessionId, key: &str) -> Option<Remembered> {
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        inner.entries.get(&(id.clone(), key.to_owned())).cloned()
    }

    pub fn put(&self, id: &SessionId, key: &str, value: Remembered) {
        if self.capacity == 0 {
            return;
        }
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let k = (id.clone(), key.to_owned());
        if inner.entries.insert(k.clone(), value).is_none() {
            inner.order.push_back(k);
        }
        while inner.order.len() > self.capacity {
            if let Some(old) = inner.order.pop_front() {
                inner.entries.remove(&old);
            }
        }
    }
}
