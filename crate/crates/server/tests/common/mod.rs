//! An in-process server on an ephemeral port with a manual clock.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use aba_core::access::{AccountConfig, PrincipalKind};
use aba_core::synth::{synthetic_curriculum, LadderConfig};
use aba_core::time::ManualClock;
use aba_core::{PatientId, Timestamp};
use aba_server::{AppState, Config};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const PEPPER: &str = "test-pepper-0123456789abcdef";
/// 2024-03-04T08:00:00Z
pub const T0: i64 = 1_709_539_200_000;
pub const REQUIRED: u32 = 2;

pub struct Accounts {
    pub configs: Vec<AccountConfig>,
    pub secrets: HashMap<String, String>,
}

/// th-a sees patients 1 and 2, th-b sees patient 3, ad-1 is an admin.
pub fn accounts() -> Accounts {
    let mut configs = Vec::new();
    let mut secrets = HashMap::new();
    for (subject, kind, caseload) in [
        ("th-a", PrincipalKind::Therapist, vec![1, 2]),
        ("th-b", PrincipalKind::Therapist, vec![3]),
        ("ad-1", PrincipalKind::Admin, vec![]),
    ] {
        let caseload: BTreeSet<PatientId> = caseload.into_iter().map(PatientId).collect();
        let (config, secret) = AccountConfig::generate(subject, kind, caseload, PEPPER.as_bytes());
        configs.push(config);
        secrets.insert(subject.to_owned(), secret);
    }
    Accounts { configs, secrets }
}

pub fn config(dir: &Path, accounts: &Accounts) -> Config {
    let curriculum = dir.join("curriculum.json");
    if !curriculum.exists() {
        let c = synthetic_curriculum(&LadderConfig { required_correct: REQUIRED, pool_extra: 1, distractors: 3 });
        std::fs::write(&curriculum, serde_json::to_vec(&c).unwrap()).unwrap();
    }
    Config {
        bind: "127.0.0.1:0".into(),
        data_dir: dir.join("data"),
        pepper: PEPPER.into(),
        curriculum: Some(curriculum),
        sweep_interval_secs: 1,
        accounts: accounts.configs.clone(),
        ..Config::default()
    }
}

pub struct TestServer {
    pub base: String,
    pub state: Arc<AppState>,
    pub clock: Arc<ManualClock>,
    pub secrets: HashMap<String, String>,
    pub client: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<Result<(), aba_server::StartupError>>>,
}

impl TestServer {
    pub async fn start(dir: &Path, accounts: &Accounts) -> Self {
        Self::start_at(dir, accounts, Arc::new(ManualClock::new(Timestamp(T0)))).await
    }

    pub async fn start_at(dir: &Path, accounts: &Accounts, clock: Arc<ManualClock>) -> Self {
        let config = config(dir, accounts);
        let listener = aba_server::bind(&config.bind).await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let state = AppState::open(config, clock.clone()).unwrap();
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(aba_server::serve(listener, state.clone(), async move {
            let _ = rx.await;
        }));
        TestServer {
            base,
            state,
            clock,
            secrets: accounts.secrets.clone(),
            client: reqwest::Client::new(),
            stop: Some(tx),
            task: Some(task),
        }
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            task.await.unwrap().unwrap();
        }
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> Reply {
        self.call_with(method, path, token, body, &[]).await
    }

    pub async fn call_with(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
        headers: &[(&str, &str)],
    ) -> Reply {
        let mut req = self.client.request(method, format!("{}{}", self.base, path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.bytes().await.unwrap().to_vec();
        let json = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        Reply { status, headers, bytes, json }
    }

    pub async fn login(&self, subject: &str) -> String {
        let secret = &self.secrets[subject];
        let r = self
            .call(Method::POST, "/auth/login", None, Some(json!({"subject_id": subject, "secret": secret})))
            .await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        r.json["token"].as_str().unwrap().to_owned()
    }

    pub async fn patient_token(&self, therapist_token: &str, patient: u64) -> String {
        let r = self.call(Method::POST, "/auth/login", Some(therapist_token), Some(json!({"patient_id": patient}))).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        r.json["token"].as_str().unwrap().to_owned()
    }

    /// Starts a session with a fresh patient credential; returns (session id, patient token).
    pub async fn start_session(&self, therapist_token: &str, patient: u64) -> (String, String) {
        let token = self.patient_token(therapist_token, patient).await;
        let r = self.call(Method::POST, "/sessions", Some(&token), None).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
        (r.json["session_id"].as_str().unwrap().to_owned(), token)
    }

    pub async fn trial(&self, token: &str, session: &str, category: &str) -> Value {
        self.clock.advance(1_000);
        let r = self
            .call(Method::POST, &format!("/sessions/{session}/trials"), Some(token), Some(json!({"category": category})))
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
        r.json
    }

    pub async fn answer(&self, token: &str, session: &str, trial: &Value, outcome: &str) -> Reply {
        self.clock.advance(2_000);
        let selected = match outcome {
            "CORRECT" if !trial["distractors"].as_array().unwrap().is_empty() => trial["target"]["id"].clone(),
            _ => Value::Null,
        };
        let body = json!({"trial_id": trial["trial_id"], "outcome": outcome, "selected": selected});
        self.call(Method::POST, &format!("/sessions/{session}/answers"), Some(token), Some(body)).await
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: reqwest::header::HeaderMap,
    pub bytes: Vec<u8>,
    pub json: Value,
}

impl Reply {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }

    pub fn code(&self) -> &str {
        self.json["code"].as_str().unwrap_or("")
    }
}
