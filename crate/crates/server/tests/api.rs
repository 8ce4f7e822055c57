mod common;

use aba_core::session::AUTO_END_AFTER_MS;
use common::{accounts, TestServer, REQUIRED};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

const PNG: &[u8] = b"\x89PNG\r\n\x1a\n\0\0\0\rIHDR";

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_version_and_request_id() {
    let dir = tempfile::tempdir().unwrap();
    let s = TestServer::start(dir.path(), &accounts()).await;
    let r = s.call(Method::GET, "/health", None, None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r.headers["x-request-id"].len(), 32);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_share_one_shape() {
    let dir = tempfile::tempdir().unwrap();
    let s = TestServer::start(dir.path(), &accounts()).await;
    let r = s.call(Method::GET, "/patients/1/progress", Some("nope.nope"), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.code(), "INVALID_CREDENTIAL");
    assert_eq!(r.json["request_id"].as_str().unwrap(), r.headers["x-request-id"].to_str().unwrap());
    assert!(r.json["message"].is_string());

    let bad = s
        .call(Method::POST, "/auth/login", None, Some(json!({"subject_id": "th-a", "secret": "guess"})))
        .await;
    assert_eq!((bad.status, bad.code()), (StatusCode::UNAUTHORIZED, "INVALID_CREDENTIAL"));
    let malformed = s.call(Method::POST, "/auth/login", None, Some(json!({"who": 1}))).await;
    assert_eq!((malformed.status, malformed.code()), (StatusCode::BAD_REQUEST, "BAD_REQUEST"));
    let missing = s.call(Method::GET, "/nowhere", None, None).await;
    assert_eq!(missing.code(), "NOT_FOUND");

    let audit = std::fs::read_to_string(dir.path().join("data/audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 2, "{audit}");
    assert!(audit.contains("\"action\":\"LOGIN\"") && audit.contains("\"action\":\"AUTHENTICATE\""));
    assert!(!audit.contains("guess"));
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn a_session_from_start_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let s = TestServer::start(dir.path(), &accounts()).await;
    let th = s.login("th-a").await;
    let (sid, pt) = s.start_session(&th, 1).await;

    // the same credential cannot open a second session at once
    let again = s.call(Method::POST, "/sessions", Some(&pt), None).await;
    assert_eq!((again.status, again.code()), (StatusCode::CONFLICT, "SESSION_ALREADY_ACTIVE"));

    let tact = s.trial(&pt, &sid, "tact").await;
    assert_eq!(tact["distractors"].as_array().unwrap().len(), 0);
    let r = s.answer(&pt, &sid, &tact, "NO_RESPONSE").await;
    assert_eq!(r.json["new_correct_count"], 0);

    let mut completed = false;
    let mut n = 0;
    while !completed {
        let t = s.trial(&pt, &sid, "listener").await;
        assert_eq!(t["objective"]["level"], 1);
        assert_eq!(t["distractors"].as_array().unwrap().len(), 3);
        let outcome = if n % 2 == 0 { "INCORRECT" } else { "CORRECT" };
        let r = s.answer(&pt, &sid, &t, outcome).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        completed = r.json["objective_completed"].as_bool().unwrap();
        n += 1;
    }
    assert_eq!(n as u32, 2 * REQUIRED);

    let p = s.call(Method::GET, "/patients/1/progress", Some(&th), None).await;
    assert_eq!(p.json["progress"]["per_category"]["listener"]["current_level"], 2);
    assert_eq!(p.json["active_session_id"], sid.as_str());

    let unknown_cat = s
        .call(Method::POST, &format!("/sessions/{sid}/trials"), Some(&pt), Some(json!({"category": "cooking"})))
        .await;
    assert_eq!(unknown_cat.code(), "UNKNOWN_CATEGORY");
    let unsupported = s
        .call(Method::POST, &format!("/sessions/{sid}/trials"), Some(&pt), Some(json!({"category": "mand"})))
        .await;
    assert_eq!(unsupported.code(), "UNSUPPORTED_CATEGORY");
    let ghost = s.answer(&pt, &sid, &json!({"trial_id": "t999", "distractors": []}), "CORRECT").await;
    assert_eq!((ghost.status, ghost.code()), (StatusCode::NOT_FOUND, "UNKNOWN_TRIAL"));

    s.clock.advance(1_000);
    let end = s.call(Method::POST, &format!("/sessions/{sid}/end"), Some(&pt), None).await;
    assert_eq!(end.status, StatusCode::OK);
    assert_eq!(end.json["trials_answered"], 1 + 2 * REQUIRED);
    assert_eq!(end.json["errors"], 1 + REQUIRED);
    let twice = s.call(Method::POST, &format!("/sessions/{sid}/end"), Some(&pt), None).await;
    assert_eq!(twice.code(), "SESSION_NOT_ACTIVE");
    let view = s.call(Method::GET, &format!("/sessions/{sid}"), Some(&th), None).await;
    assert_eq!(view.json["session"]["state"], "ENDED");

    let csv = s.call(Method::GET, "/patients/1/objectives/listener/1/report?format=csv", Some(&th), None).await;
    assert_eq!(csv.status, StatusCode::OK);
    assert!(csv.headers["content-type"].to_str().unwrap().starts_with("text/csv"));
    assert_eq!(csv.text().lines().count(), 1 + REQUIRED as usize);
    let html = s.call(Method::GET, "/patients/1/objectives/listener/1/report?format=html", Some(&th), None).await;
    assert!(html.text().contains("<table"));
    let pdf = s.call(Method::GET, "/patients/1/objectives/listener/1/report?format=pdf", Some(&th), None).await;
    assert_eq!((pdf.status, pdf.code()), (StatusCode::BAD_REQUEST, "UNSUPPORTED_FORMAT"));
    let open = s.call(Method::GET, "/patients/1/objectives/listener/2/report", Some(&th), None).await;
    assert_eq!((open.status, open.code()), (StatusCode::NOT_FOUND, "NOT_COMPLETED"));

    let m = s.call(Method::GET, "/patients/1/metrics?category=listener,tact", Some(&th), None).await;
    assert_eq!(m.status, StatusCode::OK, "{}", m.text());
    assert_eq!(m.json["completions"]["listener"], 1);
    assert_eq!(m.json["mean_psi"]["listener"], 1.0);
    assert_eq!(m.json["completion_percent"]["listener"].as_f64().unwrap(), 100.0 / 15.0);
    let attempted = s.call(Method::GET, "/patients/1/metrics?category=listener&percent_base=attempted", Some(&th), None).await;
    assert_eq!(attempted.json["completion_percent"]["listener"], 100.0);
    let window = s
        .call(Method::GET, "/patients/1/metrics?from=2024-03-05T00:00:00Z&to=2024-03-04T00:00:00Z", Some(&th), None)
        .await;
    assert_eq!((window.status, window.code()), (StatusCode::BAD_REQUEST, "BAD_WINDOW"));
    let garbage = s.call(Method::GET, "/patients/1/metrics?from=yesterday", Some(&th), None).await;
    assert_eq!(garbage.code(), "BAD_REQUEST");

    let caseload = s.call(Method::GET, "/caseload/metrics?category=listener", Some(&th), None).await;
    assert_eq!(caseload.json["completions"]["total"], 1);
    assert_eq!(caseload.json["error_summaries"]["listener"]["mean"], 1.0);
    let patients = s.call(Method::GET, "/patients", Some(&th), None).await;
    assert_eq!(patients.json.as_array().unwrap().len(), 2);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn retried_answers_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let s = TestServer::start(dir.path(), &accounts()).await;
    let th = s.login("th-a").await;
    let (sid, pt) = s.start_session(&th, 2).await;
    let t = s.trial(&pt, &sid, "vp_mts").await;
    let body = json!({"trial_id": t["trial_id"], "outcome": "CORRECT", "selected": t["target"]["id"]});
    let path = format!("/sessions/{sid}/answers");
    let key = [("Idempotency-Key", "k-1")];
    let first = s.call_with(Method::POST, &path, Some(&pt), Some(body.clone()), &key).await;
    assert_eq!(first.status, StatusCode::OK);
    // concurrent retries all see the original result
    let retries = futures_join(&s, &path, &pt, body.clone(), 8).await;
    for r in retries {
        assert_eq!((r.status, &r.json), (StatusCode::OK, &first.json));
        assert_eq!(r.headers["idempotent-replay"], "true");
    }
    let other = json!({"trial_id": t["trial_id"], "outcome": "INCORRECT", "selected": null});
    let reused = s.call_with(Method::POST, &path, Some(&pt), Some(other), &key).await;
    assert_eq!(reused.code(), "IDEMPOTENCY_KEY_REUSED");
    let no_key = s.call(Method::POST, &path, Some(&pt), Some(body)).await;
    assert_eq!((no_key.status, no_key.code()), (StatusCode::CONFLICT, "DUPLICATE_ANSWER"));

    let events = s.state.hub.events(&aba_core::SessionId::new(sid)).unwrap();
    let answers = events.iter().filter(|e| e.payload.kind() == "ANSWER_RECORDED").count();
    assert_eq!(answers, 1);
    s.stop().await;
}

async fn futures_join(s: &TestServer, path: &str, token: &str, body: Value, n: usize) -> Vec<common::Reply> {
    let mut tasks = Vec::new();
    for _ in 0..n {
        let client = s.client.clone();
        let url = format!("{}{}", s.base, path);
        let (token, body) = (token.to_owned(), body.clone());
        tasks.push(tokio::spawn(async move {
            let resp = client.post(url).bearer_auth(token).header("Idempotency-Key", "k-1").json(&body).send().await.unwrap();
            let status = resp.status();
            let headers = resp.headers().clone();
            let bytes = resp.bytes().await.unwrap().to_vec();
            common::Reply { status, headers, json: serde_json::from_slice(&bytes).unwrap(), bytes }
        }));
    }
    let mut out = Vec::new();
    for t in tasks {
        out.push(t.await.unwrap());
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn decks_are_validated_and_registered() {
    let dir = tempfile::tempdir().unwrap();
    let s = TestServer::start(dir.path(), &accounts()).await;
    let admin = s.login("ad-1").await;
    let th = s.login("th-a").await;
    std::fs::create_dir_all(dir.path().join("data/assets/farm")).unwrap();
    std::fs::write(dir.path().join("data/assets/farm/cow.png"), PNG).unwrap();
    std::fs::write(dir.path().join("data/assets/farm/notes.txt"), b"plain text").unwrap();
    let manifest = json!({
        "format_version": 1,
        "deck_id": "farm",
        "categories": ["tact"],
        "entries": [{"id": "farm-cow", "label": "cow", "image": "farm/cow.png", "interest_tags": ["animals"]}]
    });
    let forbidden = s.call(Method::POST, "/decks", Some(&th), Some(manifest.clone())).await;
    assert_eq!(forbidden.status, StatusCode::FORBIDDEN);
    let ok = s.call(Method::POST, "/decks", Some(&admin), Some(manifest)).await;
    assert_eq!(ok.status, StatusCode::CREATED, "{}", ok.text());
    assert_eq!(ok.json["stimuli_added"], 1);
    assert!(s.state.hub.curriculum().stimulus(&"farm-cow".into()).is_some());

    let bad = json!({
        "format_version": 1,
        "deck_id": "bad",
        "categories": ["cooking"],
        "entries": [
            {"id": "a", "label": "", "image": "farm/notes.txt"},
            {"id": "a", "label": "x", "image": "../etc/passwd"}
        ]
    });
    let r = s.call(Method::POST, "/decks", Some(&admin), Some(bad)).await;
    assert_eq!((r.status, r.code()), (StatusCode::UNPROCESSABLE_ENTITY, "DECK_INVALID"));
    let msg = r.json["message"].as_str().unwrap();
    for needle in ["cooking", "share stimulus id", "not a PNG", "empty label", "inside the deck"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    let list = s.call(Method::GET, "/decks", Some(&th), None).await;
    assert_eq!(list.json.as_array().unwrap().len(), 1);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn stale_sessions_are_swept() {
    let dir = tempfile::tempdir().unwrap();
    let s = TestServer::start(dir.path(), &accounts()).await;
    let th = s.login("th-b").await;
    let (sid, _) = s.start_session(&th, 3).await;
    s.clock.advance(AUTO_END_AFTER_MS + 1);
    let th = s.login("th-b").await;
    let mut ended = false;
    for _ in 0..40 {
        let v = s.call(Method::GET, &format!("/sessions/{sid}"), Some(&th), None).await;
        if v.json["session"]["auto_ended"] == true {
            ended = true;
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    }
    assert!(ended, "sweeper never closed the session");
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_keeps_progress_and_open_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let acc = accounts();
    let s = TestServer::start(dir.path(), &acc).await;
    let th = s.login("th-a").await;
    let (sid, pt) = s.start_session(&th, 1).await;
    for _ in 0..REQUIRED {
        let t = s.trial(&pt, &sid, "tact").await;
        s.answer(&pt, &sid, &t, "CORRECT").await;
    }
    let before = s.call(Method::GET, "/patients/1/progress", Some(&th), None).await.json;
    let clock = s.clock.clone();
    s.stop().await;

    let s = TestServer::start_at(dir.path(), &acc, clock).await;
    let th = s.login("th-a").await;
    let after = s.call(Method::GET, "/patients/1/progress", Some(&th), None).await.json;
    assert_eq!(before, after);
    // patient credentials live in memory only; the therapist finishes the session
    let t = s.trial(&th, &sid, "tact").await;
    assert_eq!(t["objective"]["level"], 2);
    let end = s.call(Method::POST, &format!("/sessions/{sid}/end"), Some(&th), None).await;
    assert_eq!(end.status, StatusCode::OK);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn occupied_port_is_named() {
    let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let err = aba_server::bind(&addr).await.unwrap_err();
    assert!(err.to_string().contains(&addr), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn unwritable_data_dir_fails_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"").unwrap();
    let mut config = common::config(dir.path(), &accounts());
    config.data_dir = file.join("data");
    let err = aba_server::AppState::open(config, std::sync::Arc::new(aba_core::time::SystemClock)).err().unwrap();
    assert!(err.to_string().contains("occupied"), "{err}");
}
