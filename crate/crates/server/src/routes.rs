use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{FromRequestParts, MatchedPath, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use aba_core::access::{authorize, Action, AuditRecord, Principal, PrincipalKind, Target};
use aba_core::analytics::{
    category_error_summary, completion_stats, objective_report, patient_metrics, AggregateSummary,
    CompletionStats, PercentBase, TimeWindow,
};
use aba_core::deck::{validate_manifest, DeckManifest};
use aba_core::domain::GameType;
use aba_core::report::{render_report, ReportFormat};
use aba_core::session::{Outcome, Session, SessionSummary, TherapistId, TrialId, TrialOptions};
use aba_core::{CategoryId, PatientId, SessionId, StimulusId, Timestamp};

use crate::error::ApiError;
use crate::state::{AppState, Remembered};

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub const REQUEST_ID_HEADER: &str = "x-request-id";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replay";

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/auth/login", post(login))
        .route("/categories", get(categories))
        .route("/patients", get(caseload))
        .route("/caseload/metrics", get(caseload_metrics))
        .route("/sessions", post(start_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/trials", post(present_trial))
        .route("/sessions/{id}/answers", post(record_answer))
        .route("/sessions/{id}/end", post(end_session))
        .route("/patients/{id}/progress", get(progress))
        .route("/patients/{id}/metrics", get(metrics))
        .route("/patients/{id}/objectives/{category}/{level}/report", get(report))
        .route("/decks", get(list_decks).post(register_deck))
        .fallback(not_found)
        .layer(axum::middleware::from_fn(request_context))
        .with_state(state)
}

/// Per-request id, echoed in the `x-request-id` header and error bodies.
#[derive(Debug, Clone)]
pub struct RequestId(pub String);

async fn request_context(mut req: Request, next: Next) -> Response {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let method = req.method().clone();
    let route = req
        .extensions()
        .get::<MatchedPath>()
        .map(|m| m.as_str().to_owned())
        .unwrap_or_else(|| "unmatched".into());
    req.extensions_mut().insert(RequestId(id.clone()));
    let started = Instant::now();
    let mut response = next.run(req).await;
    // only the route template is logged: paths carry patient ids
    tracing::info!(
        request_id = %id,
        method = %method,
        route = %route,
        status = response.status().as_u16(),
        elapsed_ms = started.elapsed().as_millis() as u64,
    );
    if let Ok(v) = HeaderValue::from_str(&id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

impl<S: Send + Sync> FromRequestParts<S> for RequestId {
    type Rejection = std::convert::Infallible;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        Ok(parts.extensions.get::<RequestId>().cloned().unwrap_or_else(|| RequestId("unknown".into())))
    }
}

fn endpoint(parts: &Parts) -> String {
    let route = parts.extensions.get::<MatchedPath>().map(|m| m.as_str()).unwrap_or("unmatched");
    format!("{} {route}", parts.method)
}

/// An authenticated request.
pub struct Caller {
    pub principal: Principal,
    pub token: String,
    pub rid: String,
    pub endpoint: String,
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

fn authenticate(state: &AppState, headers: &HeaderMap, rid: String, endpoint: String) -> ApiResult<Caller> {
    let result = bearer(headers)
        .ok_or("missing bearer token")
        .and_then(|t| state.credentials.authenticate(t).map(|p| (t, p)).map_err(|_| "invalid credential"));
    match result {
        Ok((token, principal)) => Ok(Caller { principal, token: token.to_owned(), rid, endpoint }),
        Err(reason) => {
            state.audit.record(AuditRecord {
                at: state.hub.now(),
                principal_kind: None,
                subject_id: None,
                action: "AUTHENTICATE".into(),
                patient_id: None,
                endpoint,
                reason: reason.into(),
                request_id: rid.clone(),
            });
            Err(ApiError::new(StatusCode::UNAUTHORIZED, "INVALID_CREDENTIAL", "authentication required", &rid))
        }
    }
}

impl FromRequestParts<Shared> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, ApiError> {
        let rid = RequestId::from_request_parts(parts, state).await.unwrap_or_else(|e| match e {}).0;
        authenticate(state, &parts.headers, rid, endpoint(parts))
    }
}

impl Caller {
    fn deny(&self, state: &AppState, action: &str, patient: Option<PatientId>, reason: &str) -> ApiError {
        state.audit.record(AuditRecord {
            at: state.hub.now(),
            principal_kind: Some(self.principal.kind),
            subject_id: Some(self.principal.subject_id.clone()),
            action: action.into(),
            patient_id: patient,
            endpoint: self.endpoint.clone(),
            reason: reason.into(),
            request_id: self.rid.clone(),
        });
        ApiError::new(StatusCode::FORBIDDEN, "FORBIDDEN", "not permitted", &self.rid)
    }

    fn check(&self, state: &AppState, target: Target<'_>, action: Action) -> ApiResult<()> {
        if authorize(&self.principal, target, action).allowed() {
            return Ok(());
        }
        let patient = match target {
            Target::Patient { patient, .. } => Some(patient),
            Target::Configuration => None,
        };
        let name = serde_json::to_value(action).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        Err(self.deny(state, &name, patient, "outside caseload or role"))
    }

    fn bad(&self, message: impl Into<String>) -> ApiError {
        ApiError::bad_request(message, &self.rid)
    }
}

/// JSON body extraction whose rejections use the common error body.
pub struct Body<T>(pub T);

impl<T: serde::de::DeserializeOwned> axum::extract::FromRequest<Shared> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &Shared) -> Result<Self, ApiError> {
        let rid = req.extensions().get::<RequestId>().map(|r| r.0.clone()).unwrap_or_default();
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::bad_request(e.body_text(), &rid)),
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

async fn not_found(RequestId(rid): RequestId) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint", &rid)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok", version: env!("CARGO_PKG_VERSION") })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoginRequest {
    subject_id: Option<String>,
    secret: Option<String>,
    /// Asks for a patient credential, with a therapist bearer token.
    patient_id: Option<PatientId>,
}

#[derive(Serialize)]
struct LoginResponse {
    token: String,
    kind: PrincipalKind,
    expires_at: Timestamp,
    #[serde(skip_serializing_if = "Option::is_none")]
    patient_id: Option<PatientId>,
}

async fn login(
    State(state): State<Shared>,
    RequestId(rid): RequestId,
    headers: HeaderMap,
    Body(req): Body<LoginRequest>,
) -> ApiResult<Response> {
    const ENDPOINT: &str = "POST /auth/login";
    match (req.subject_id, req.secret, req.patient_id) {
        (Some(subject), Some(secret), None) => {
            let ttl = state.config.token_ttl_secs as i64 * 1000;
            match state.credentials.login(&subject, &secret, ttl) {
                Ok((token, p)) => {
                    let body = LoginResponse { token, kind: p.kind, expires_at: p.expires_at, patient_id: None };
                    Ok((StatusCode::OK, Json(body)).into_response())
                }
                Err(e) => {
                    state.audit.record(AuditRecord {
                        at: state.hub.now(),
                        principal_kind: None,
                        subject_id: None,
                        action: "LOGIN".into(),
                        patient_id: None,
                        endpoint: ENDPOINT.into(),
                        reason: "invalid credential".into(),
                        request_id: rid.clone(),
                    });
                    Err(ApiError::new(StatusCode::UNAUTHORIZED, e.code(), "invalid credential", &rid))
                }
            }
        }
        (None, None, Some(patient)) => {
            let caller = authenticate(&state, &headers, rid, ENDPOINT.into())?;
            if caller.principal.kind != PrincipalKind::Therapist {
                return Err(caller.deny(&state, "WRITE", Some(patient), "only therapists issue patient credentials"));
            }
            caller.check(&state, Target::Patient { patient, session: None }, Action::Write)?;
            let expires_at = state.hub.now().plus_millis(state.config.patient_token_ttl_secs as i64 * 1000);
            let principal = Principal {
                kind: PrincipalKind::PatientSession,
                subject_id: caller.principal.subject_id.clone(),
                caseload: BTreeSet::new(),
                patient: Some(patient),
                session: None,
                expires_at,
            };
            let token = state.credentials.issue(principal);
            let body = LoginResponse { token, kind: PrincipalKind::PatientSession, expires_at, patient_id: Some(patient) };
            Ok((StatusCode::OK, Json(body)).into_response())
        }
        _ => Err(ApiError::bad_request("send subject_id and secret, or patient_id", &rid)),
    }
}

#[derive(Serialize)]
struct CategoryView {
    id: CategoryId,
    name: String,
    game_type: GameType,
    has_ladder: bool,
}

async fn categories(State(state): State<Shared>, caller: Caller) -> ApiResult<Json<Vec<CategoryView>>> {
    if caller.principal.kind == PrincipalKind::PatientSession {
        // the tablet learns categories through trials
        caller.check(&state, Target::Configuration, Action::Read)?;
    }
    let c = state.hub.curriculum();
    Ok(Json(
        c.categories()
            .map(|cat| CategoryView {
                id: cat.id.clone(),
                name: cat.name.clone(),
                game_type: cat.game_type,
                has_ladder: c.ladder(&cat.id).is_ok(),
            })
            .collect(),
    ))
}

#[derive(Serialize)]
struct CaseloadEntry {
    patient_id: PatientId,
    active_session_id: Option<SessionId>,
    sessions: usize,
}

async fn caseload(State(state): State<Shared>, caller: Caller) -> ApiResult<Json<Vec<CaseloadEntry>>> {
    if caller.principal.kind != PrincipalKind::Therapist {
        return Err(caller.deny(&state, "READ", None, "caseload is for therapists"));
    }
    Ok(Json(
        caller
            .principal
            .caseload
            .iter()
            .map(|p| CaseloadEntry {
                patient_id: *p,
                active_session_id: state.hub.active_session(*p),
                sessions: state.hub.logs_for_patient(*p).len(),
            })
            .collect(),
    ))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct WindowQuery {
    /// Comma-separated category ids; every category with a ladder when absent.
    category: Option<String>,
    from: Option<String>,
    to: Option<String>,
    percent_base: Option<PercentBase>,
}

impl WindowQuery {
    fn window(&self, rid: &str) -> ApiResult<TimeWindow> {
        let parse = |s: &Option<String>, default: Timestamp| match s {
            None => Ok(default),
            Some(v) => Timestamp::parse_iso8601(v)
                .ok_or_else(|| ApiError::bad_request(format!("{v:?} is not an ISO-8601 timestamp"), rid)),
        };
        let from = parse(&self.from, TimeWindow::ALL.from)?;
        let to = parse(&self.to, TimeWindow::ALL.to)?;
        TimeWindow::new(from, to).map_err(|e| ApiError::analytics(e, rid))
    }

    fn categories(&self, state: &AppState) -> BTreeSet<CategoryId> {
        match &self.category {
            Some(list) => list.split(',').filter(|s| !s.is_empty()).map(CategoryId::from).collect(),
            None => state.hub.curriculum().ladders().map(|l| l.category.clone()).collect(),
        }
    }
}

/// Query parsing whose rejections use the common error body.
fn parse_query<T: serde::de::DeserializeOwned>(raw: Option<&str>, rid: &str) -> ApiResult<T> {
    let uri = format!("/?{}", raw.unwrap_or("")).parse().map_err(|_| ApiError::bad_request("bad query string", rid))?;
    Query::<T>::try_from_uri(&uri).map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text(), rid))
}

#[derive(Serialize)]
struct CaseloadMetrics {
    window: TimeWindow,
    completions: CompletionStats,
    error_summaries: BTreeMap<CategoryId, Option<AggregateSummary>>,
}

async fn caseload_metrics(
    State(state): State<Shared>,
    caller: Caller,
    axum::extract::RawQuery(raw): axum::extract::RawQuery,
) -> ApiResult<Json<CaseloadMetrics>> {
    if caller.principal.kind != PrincipalKind::Therapist {
        return Err(caller.deny(&state, "READ", None, "caseload is for therapists"));
    }
    let q: WindowQuery = parse_query(raw.as_deref(), &caller.rid)?;
    let window = q.window(&caller.rid)?;
    let cats = q.categories(&state);
    let patients = caller.principal.caseload.clone();
    let out = blocking(move || {
        let logs: Vec<_> = patients.iter().flat_map(|p| state.hub.logs_for_patient(*p)).collect();
        let in_window: Vec<_> = logs.iter().filter(|l| window.contains(l[0].timestamp)).cloned().collect();
        let error_summaries =
            cats.iter().map(|c| (c.clone(), category_error_summary(&in_window, c).ok().map(|s| s.summary))).collect();
        CaseloadMetrics { window, completions: completion_stats(&logs, &patients, window, &cats), error_summaries }
    })
    .await;
    Ok(Json(out))
}

async fn start_session(State(state): State<Shared>, caller: Caller) -> ApiResult<Response> {
    let Some(patient) = caller.principal.patient.filter(|_| caller.principal.kind == PrincipalKind::PatientSession)
    else {
        return Err(caller.deny(&state, "WRITE", None, "sessions start from a patient credential"));
    };
    caller.check(&state, Target::Patient { patient, session: None }, Action::Write)?;
    let therapist = TherapistId::new(caller.principal.subject_id.clone());
    let token = caller.token.clone();
    let st = state.clone();
    let session = blocking(move || st.hub.start_session(&token, &st.credentials, therapist))
        .await
        .map_err(|e| ApiError::session(e, &caller.rid))?;
    state
        .credentials
        .bind_session(&caller.token, session.session_id.clone())
        .map_err(|e| ApiError::new(StatusCode::UNAUTHORIZED, e.code(), "credential expired", &caller.rid))?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

/// Looks up the session and checks the caller may act on it.
fn session_for(state: &AppState, caller: &Caller, id: &SessionId, action: Action) -> ApiResult<Session> {
    let session = state
        .hub
        .session(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", "unknown session", &caller.rid))?;
    caller.check(state, Target::Patient { patient: session.patient_id, session: Some(id) }, action)?;
    Ok(session)
}

#[derive(Serialize)]
struct SessionView {
    session: Session,
    summary: SessionSummary,
}

async fn get_session(
    State(state): State<Shared>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let id = SessionId::new(id);
    let session = session_for(&state, &caller, &id, Action::Read)?;
    let events = state.hub.events(&id).unwrap_or_default();
    Ok(Json(SessionView { summary: SessionSummary::from_events(&id, &events), session }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialRequest {
    category: CategoryId,
    seed: Option<u64>,
    #[serde(default)]
    interests: BTreeSet<String>,
}

async fn present_trial(
    State(state): State<Shared>,
    caller: Caller,
    Path(id): Path<String>,
    Body(req): Body<TrialRequest>,
) -> ApiResult<Response> {
    let id = SessionId::new(id);
    session_for(&state, &caller, &id, Action::Write)?;
    let options = TrialOptions { seed: req.seed, interests: req.interests };
    let st = state.clone();
    let spec = blocking(move || st.hub.present_trial(&id, &req.category, &options))
        .await
        .map_err(|e| ApiError::session(e, &caller.rid))?;
    Ok((StatusCode::CREATED, Json(spec)).into_response())
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct AnswerRequest {
    trial_id: TrialId,
    outcome: Outcome,
    selected: Option<StimulusId>,
}

async fn record_answer(
    State(state): State<Shared>,
    caller: Caller,
    headers: HeaderMap,
    Path(id): Path<String>,
    Body(req): Body<AnswerRequest>,
) -> ApiResult<Response> {
    let id = SessionId::new(id);
    session_for(&state, &caller, &id, Action::Write)?;
    let key = match headers.get(IDEMPOTENCY_HEADER) {
        None => None,
        Some(v) => match v.to_str() {
            Ok(k) if !k.is_empty() && k.len() <= 128 => Some(k.to_owned()),
            _ => return Err(caller.bad("Idempotency-Key must be 1 to 128 visible characters")),
        },
    };
    let fingerprint = serde_json::to_string(&req).expect("answer requests serialize");
    let lock = state.idempotency.session_lock(&id);
    let _guard = lock.lock().await;
    if let Some(k) = &key {
        if let Some(seen) = state.idempotency.get(&id, k) {
            if seen.fingerprint != fingerprint {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "IDEMPOTENCY_KEY_REUSED",
                    "idempotency key was used for a different answer",
                    &caller.rid,
                ));
            }
            let mut response = Json(seen.result).into_response();
            response.headers_mut().insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
            return Ok(response);
        }
    }
    let st = state.clone();
    let sid = id.clone();
    let result = blocking(move || st.hub.record_answer(&sid, &req.trial_id, req.outcome, req.selected))
        .await
        .map_err(|e| ApiError::session(e, &caller.rid))?;
    if let Some(k) = &key {
        state.idempotency.put(&id, k, Remembered { fingerprint, result });
    }
    Ok(Json(result).into_response())
}

async fn end_session(
    State(state): State<Shared>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionSummary>> {
    let id = SessionId::new(id);
    session_for(&state, &caller, &id, Action::Write)?;
    let st = state.clone();
    let sid = id.clone();
    let summary = blocking(move || st.hub.end_session(&sid)).await.map_err(|e| ApiError::session(e, &caller.rid))?;
    state.idempotency.forget_session(&id);
    Ok(Json(summary))
}

#[derive(Serialize)]
struct ProgressView {
    patient_id: PatientId,
    active_session_id: Option<SessionId>,
    progress: aba_core::PatientProgress,
}

async fn progress(
    State(state): State<Shared>,
    caller: Caller,
    Path(patient): Path<u64>,
) -> ApiResult<Json<ProgressView>> {
    let patient = PatientId(patient);
    caller.check(&state, Target::Patient { patient, session: None }, Action::Read)?;
    Ok(Json(ProgressView {
        patient_id: patient,
        active_session_id: state.hub.active_session(patient),
        progress: state.hub.progress(patient),
    }))
}

async fn metrics(
    State(state): State<Shared>,
    caller: Caller,
    Path(patient): Path<u64>,
    axum::extract::RawQuery(raw): axum::extract::RawQuery,
) -> ApiResult<Json<aba_core::analytics::PatientMetrics>> {
    let patient = PatientId(patient);
    caller.check(&state, Target::Patient { patient, session: None }, Action::Read)?;
    let q: WindowQuery = parse_query(raw.as_deref(), &caller.rid)?;
    let window = q.window(&caller.rid)?;
    let cats = q.categories(&state);
    let base = q.percent_base.unwrap_or_default();
    let st = state.clone();
    let m = blocking(move || patient_metrics(&st.hub.logs_for_patient(patient), patient, &cats, window, base)).await;
    Ok(Json(m))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ReportQuery {
    format: Option<String>,
}

async fn report(
    State(state): State<Shared>,
    caller: Caller,
    Path((patient, category, level)): Path<(u64, String, String)>,
    axum::extract::RawQuery(raw): axum::extract::RawQuery,
) -> ApiResult<Response> {
    let patient = PatientId(patient);
    caller.check(&state, Target::Patient { patient, session: None }, Action::Report)?;
    let q: ReportQuery = parse_query(raw.as_deref(), &caller.rid)?;
    let format = ReportFormat::from_str(q.format.as_deref().unwrap_or("csv"))
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.code(), e.to_string(), &caller.rid))?;
    let level: u8 = level.parse().map_err(|_| caller.bad(format!("level {level:?} is not a number")))?;
    let category = CategoryId::from(category.as_str());
    let st = state.clone();
    let report = blocking(move || objective_report(&st.hub.logs_for_patient(patient), patient, &category, level))
        .await
        .map_err(|e| ApiError::analytics(e, &caller.rid))?;
    let body = render_report(&report, format);
    Ok(([(CONTENT_TYPE, format.content_type())], body).into_response())
}

async fn list_decks(State(state): State<Shared>, caller: Caller) -> ApiResult<Json<Vec<DeckManifest>>> {
    caller.check(&state, Target::Configuration, Action::Read)?;
    state.decks.list().map(Json).map_err(|e| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "STORAGE_FAILURE", e.to_string(), &caller.rid)
    })
}

#[derive(Serialize)]
struct DeckRegistered {
    deck_id: String,
    stimuli_added: usize,
}

async fn register_deck(
    State(state): State<Shared>,
    caller: Caller,
    Body(manifest): Body<DeckManifest>,
) -> ApiResult<Response> {
    caller.check(&state, Target::Configuration, Action::Write)?;
    let curriculum = state.hub.curriculum();
    let violations = validate_manifest(&manifest, &state.config.assets_dir(), Some(&curriculum));
    if !violations.is_empty() {
        let message = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "DECK_INVALID", message, &caller.rid));
    }
    let deck_id = state.decks.register(&manifest).map_err(|e| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "STORAGE_FAILURE", e.to_string(), &caller.rid)
    })?;
    let mut next = (*curriculum).clone();
    let stimuli_added = next.register_stimuli(manifest.stimuli());
    state.hub.set_curriculum(Arc::new(next));
    Ok((StatusCode::CREATED, Json(DeckRegistered { deck_id, stimuli_added })).into_response())
}
