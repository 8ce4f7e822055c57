//! Authentication and caseload-scoped authorization.
//!
//! Bearer tokens have the form `<credential id>.<secret>`; only a salted,
//! peppered SHA-256 of the secret is kept, compared in constant time. Every
//! failure mode of [`CredentialStore::authenticate`] returns the same
//! [`AuthError::InvalidCredential`].

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::domain::PatientId;
use crate::session::{PatientCredentials, SessionId};
use crate::time::{Clock, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PrincipalKind {
    Therapist,
    PatientSession,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub kind: PrincipalKind,
    pub subject_id: String,
    /// Patients a therapist may access. Empty for other kinds.
    #[serde(default)]
    pub caseload: BTreeSet<PatientId>,
    /// The one patient a PATIENT_SESSION credential acts for.
    #[serde(default)]
    pub patient: Option<PatientId>,
    /// Set once the patient credential has started its session.
    #[serde(default)]
    pub session: Option<SessionId>,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Read,
    Write,
    Report,
    Export,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target<'a> {
    Patient { patient: PatientId, session: Option<&'a SessionId> },
    /// Deck and curriculum configuration.
    Configuration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn allowed(self) -> bool {
        self == Decision::Allow
    }

    fn from_bool(b: bool) -> Self {
        if b {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }
}

/// Least-privilege rules:
///
/// * THERAPIST: any action on patients in the caseload; may read configuration.
/// * PATIENT_SESSION: read its own patient; write only to its own patient and
///   its own session (or start one while unbound).
/// * ADMIN: configuration and dataset export; never reads patient data.
pub fn authorize(principal: &Principal, target: Target<'_>, action: Action) -> Decision {
    use PrincipalKind::*;
    let allowed = match (principal.kind, target) {
        (Therapist, Target::Patient { patient, .. }) => principal.caseload.contains(&patient),
        (Therapist, Target::Configuration) => action == Action::Read,
        (PatientSession, Target::Patient { patient, session }) => {
            principal.patient == Some(patient)
                && match action {
                    Action::Read => true,
                    Action::Write => match (session, &principal.session) {
                        (None, _) => true,
                        (Some(s), Some(bound)) => s == bound,
                        (Some(_), None) => false,
                    },
                    Action::Report | Action::Export => false,
                }
        }
        (PatientSession, Target::Configuration) => false,
        (Admin, Target::Patient { .. }) => action == Action::Export,
        (Admin, Target::Configuration) => matches!(action, Action::Read | Action::Write),
    };
    Decision::from_bool(allowed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("invalid credential")]
    InvalidCredential,
}

impl AuthError {
    pub fn code(&self) -> &'static str {
        "INVALID_CREDENTIAL"
    }
}

fn secret_hash(pepper: &[u8], salt: &[u8], secret: &[u8]) -> [u8; 32] {
    let digest = Sha256::new()
        .chain_update(pepper)
        .chain_update(salt)
        .chain_update(secret)
        .finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// A long-lived therapist or admin account, as written in the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountConfig {
    pub subject_id: String,
    pub kind: PrincipalKind,
    /// Hex salt.
    pub salt: String,
    /// Hex SHA-256 of pepper ‖ salt ‖ secret.
    pub secret_hash: String,
    #[serde(default)]
    pub caseload: BTreeSet<PatientId>,
}

impl AccountConfig {
    /// Creates an account entry with a fresh random secret, returned alongside.
    pub fn generate(
        subject_id: &str,
        kind: PrincipalKind,
        caseload: BTreeSet<PatientId>,
        pepper: &[u8],
    ) -> (Self, String) {
        let mut rng = ChaCha20Rng::from_os_rng();
        let mut salt = [0u8; 16];
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut secret);
        let secret = hex::encode(secret);
        let account = AccountConfig {
            subject_id: subject_id.to_owned(),
            kind,
            salt: hex::encode(salt),
            secret_hash: hex::encode(secret_hash(pepper, &salt, secret.as_bytes())),
            caseload,
        };
        (account, secret)
    }
}

struct Issued {
    salt: [u8; 16],
    hash: [u8; 32],
    principal: Principal,
}

struct StoreInner {
    issued: HashMap<String, Issued>,
    rng: ChaCha20Rng,
}

/// Issues and verifies bearer tokens.
pub struct CredentialStore {
    pepper: Vec<u8>,
    accounts: HashMap<String, AccountConfig>,
    clock: Arc<dyn Clock>,
    inner: Mutex<StoreInner>,
}

impl CredentialStore {
    pub fn new(pepper: impl Into<Vec<u8>>, accounts: Vec<AccountConfig>, clock: Arc<dyn Clock>) -> Self {
        CredentialStore {
            pepper: pepper.into(),
            accounts: accounts.into_iter().map(|a| (a.subject_id.clone(), a)).collect(),
            clock,
            inner: Mutex::new(StoreInner { issued: HashMap::new(), rng: ChaCha20Rng::from_os_rng() }),
        }
    }

    fn inner(&self) -> std::sync::MutexGuard<'_, StoreInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Verifies an account secret and returns the account's principal
    /// template (without expiry applied).
    pub fn verify_account(&self, subject_id: &str, secret: &str) -> Result<&AccountConfig, AuthError> {
        const DUMMY: [u8; 32] = [0u8; 32];
        let account = self.accounts.get(subject_id);
        let (salt, expected) = match account {
            Some(a) => (
                hex::decode(&a.salt).unwrap_or_default(),
                hex::decode(&a.secret_hash).unwrap_or_default(),
            ),
            None => (vec![0u8; 16], DUMMY.to_vec()),
        };
        let actual = secret_hash(&self.pepper, &salt, secret.as_bytes());
        let matches: bool = actual.ct_eq(expected.as_slice()).into();
        match account {
            Some(a) if matches && expected.len() == 32 => Ok(a),
            _ => Err(AuthError::InvalidCredential),
        }
    }

    /// Issues a bearer token for a principal.
    pub fn issue(&self, principal: Principal) -> String {
        let mut inner = self.inner();
        let mut id = [0u8; 8];
        let mut salt = [0u8; 16];
        let mut secret = [0u8; 32];
        loop {
            inner.rng.fill_bytes(&mut id);
            if !inner.issued.contains_key(&hex::encode(id)) {
                break;
            }
        }
        inner.rng.fill_bytes(&mut salt);
        inner.rng.fill_bytes(&mut secret);
        let secret = hex::encode(secret);
        let id = hex::encode(id);
        let hash = secret_hash(&self.pepper, &salt, secret.as_bytes());
        inner.issued.insert(id.clone(), Issued { salt, hash, principal });
        format!("{id}.{secret}")
    }

    pub fn login(&self, subject_id: &str, secret: &str, ttl_ms: i64) -> Result<(String, Principal), AuthError> {
        let account = self.verify_account(subject_id, secret)?;
        let principal = Principal {
            kind: account.kind,
            subject_id: account.subject_id.clone(),
            caseload: if account.kind == PrincipalKind::Therapist {
                account.caseload.clone()
            } else {
                BTreeSet::new()
            },
            patient: None,
            session: None,
            expires_at: self.clock.now().plus_millis(ttl_ms),
        };
        Ok((self.issue(principal.clone()), principal))
    }

    fn lookup<'a>(&self, inner: &'a mut StoreInner, token: &str) -> Option<&'a mut Issued> {
        let (id, secret) = token.split_once('.')?;
        if id.len() != 16 || secret.len() != 64 {
            return None;
        }
        let issued = inner.issued.get_mut(id)?;
        let actual = secret_hash(&self.pepper, &issued.salt, secret.as_bytes());
        bool::from(actual.ct_eq(&issued.hash)).then_some(issued)
    }

    pub fn authenticate(&self, token: &str) -> Result<Principal, AuthError> {
        let now = self.clock.now();
        let mut inner = self.inner();
        let issued = self.lookup(&mut inner, token).ok_or(AuthError::InvalidCredential)?;
        if issued.principal.expires_at <= now {
            return Err(AuthError::InvalidCredential);
        }
        Ok(issued.principal.clone())
    }

    /// Ties a patient credential to the session it started.
    pub fn bind_session(&self, token: &str, session: SessionId) -> Result<(), AuthError> {
        let mut inner = self.inner();
        let issued = self.lookup(&mut inner, token).ok_or(AuthError::InvalidCredential)?;
        if issued.principal.kind != PrincipalKind::PatientSession {
            return Err(AuthError::InvalidCredential);
        }
        issued.principal.session = Some(session);
        Ok(())
    }

    pub fn revoke(&self, token: &str) {
        let mut inner = self.inner();
        if let Some((id, _)) = token.split_once('.') {
            if self.lookup(&mut inner, token).is_some() {
                inner.issued.remove(id);
            }
        }
    }
}

impl PatientCredentials for CredentialStore {
    fn resolve_patient(&self, token: &str) -> Option<PatientId> {
        self.authenticate(token)
            .ok()
            .filter(|p| p.kind == PrincipalKind::PatientSession)
            .and_then(|p| p.patient)
    }
}

/// One audited denial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: Timestamp,
    pub principal_kind: Option<PrincipalKind>,
    pub subject_id: Option<String>,
    pub action: String,
    pub patient_id: Option<PatientId>,
    pub endpoint: String,
    pub reason: String,
    pub request_id: String,
}

/// Append-only audit trail of authentication and authorization denials,
/// kept apart from session logs.
pub struct AuditLog {
    file: Option<Mutex<File>>,
    memory: Mutex<Vec<AuditRecord>>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        AuditLog { file: None, memory: Mutex::new(Vec::new()) }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { file: Some(Mutex::new(file)), memory: Mutex::new(Vec::new()) })
    }

    pub fn record(&self, record: AuditRecord) {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&record).expect("audit records serialize");
            line.push('\n');
            let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = f.write_all(line.as_bytes()) {
                eprintln!("audit log write failed: {e}");
            }
        }
        self.memory.lock().unwrap_or_else(|p| p.into_inner()).push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.memory.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}
