use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::assessment::{validate_assessment, CaseContext, FieldError, SCHEMA_VERSION};
use crate::auth::{mint_token, verify_token};
use crate::persist::{AssessmentStore, PersistError};
use crate::store::{check_id, BlindedReport, CaseStore, SliceRequest, StoreError, OVERLAYS};

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub data_dir: PathBuf,
    pub seed: u64,
    /// Framework ids; a case's reports live at `reports/<id>.txt`.
    pub frameworks: Vec<String>,
    /// HMAC key for session tokens. A random key means tokens do not survive
    /// a restart.
    pub token_secret: Vec<u8>,
}

impl ReviewConfig {
    pub fn new(data_dir: impl Into<PathBuf>, seed: u64, frameworks: Vec<String>) -> Self {
        let mut token_secret = vec![0u8; 32];
        rand::rng().fill_bytes(&mut token_secret);
        ReviewConfig {
            data_dir: data_dir.into(),
            seed,
            frameworks,
            token_secret,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("at least two report frameworks must be registered, got {0}")]
    TooFewFrameworks(usize),
    #[error("framework id {0:?} is not a valid identifier")]
    BadFramework(String),
    #[error("duplicate framework id {0:?}")]
    DuplicateFramework(String),
    #[error("more than 26 frameworks registered")]
    TooManyFrameworks,
}

#[derive(Debug)]
pub struct AppState {
    pub config: ReviewConfig,
    pub cases: CaseStore,
    pub assessments: AssessmentStore,
}

impl AppState {
    pub fn new(config: ReviewConfig) -> Result<Arc<Self>, ConfigError> {
        let n = config.frameworks.len();
        if n < 2 {
            return Err(ConfigError::TooFewFrameworks(n));
        }
        if n > 26 {
            return Err(ConfigError::TooManyFrameworks);
        }
        for (i, f) in config.frameworks.iter().enumerate() {
            if check_id(f).is_err() {
                return Err(ConfigError::BadFramework(f.clone()));
            }
            if config.frameworks[..i].contains(f) {
                return Err(ConfigError::DuplicateFramework(f.clone()));
            }
        }
        Ok(Arc::new(AppState {
            cases: CaseStore::new(&config.data_dir, config.frameworks.clone(), config.seed),
            assessments: AssessmentStore::new(&config.data_dir),
            config,
        }))
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Unauthorized,
    Forbidden(String),
    NotFound(String),
    Invalid(Vec<FieldError>),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message, errors) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m, vec![]),
            ApiError::Unauthorized => (
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or invalid session token".into(),
                vec![],
            ),
            ApiError::Forbidden(m) => (StatusCode::FORBIDDEN, "forbidden", m, vec![]),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m, vec![]),
            ApiError::Invalid(errs) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation",
                "assessment failed validation".into(),
                errs,
            ),
            ApiError::Internal(detail) => {
                // detail may contain report paths, which name frameworks
                tracing::error!("{detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    "internal error".into(),
                    vec![],
                )
            }
        };
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": kind,
            "message": message,
            "errors": errors,
        });
        (status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownCase(_) => ApiError::NotFound(e.to_string()),
            StoreError::BadId(_)
            | StoreError::UnknownSequence { .. }
            | StoreError::UnknownOverlay(_)
            | StoreError::SliceOutOfRange { .. }
            | StoreError::BadWindow { .. } => ApiError::BadRequest(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<PersistError> for ApiError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Id(s) => s.into(),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Reviewer identity from `Authorization: Bearer` or a `token` query
/// parameter (image elements cannot set headers).
fn reviewer_from(state: &AppState, headers: &HeaderMap, query_token: Option<&str>) -> ApiResult<String> {
    let header_token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let token = header_token.or(query_token).ok_or(ApiError::Unauthorized)?;
    verify_token(&state.config.token_secret, token.trim()).ok_or(ApiError::Unauthorized)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

#[derive(Deserialize)]
struct LoginRequest {
    reviewer_id: String,
}

async fn login(State(state): State<Arc<AppState>>, Json(req): Json<LoginRequest>) -> ApiResult<Json<Value>> {
    check_id(&req.reviewer_id)
        .map_err(|_| ApiError::BadRequest("reviewer_id may only contain letters, digits, '_', '-' and '.'".into()))?;
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "reviewer_id": req.reviewer_id,
        "token": mint_token(&state.config.token_secret, &req.reviewer_id),
    })))
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

#[derive(Serialize)]
struct CaseListEntry {
    case_id: String,
    sequences: Vec<String>,
    n_reports: usize,
    reviewed: bool,
}

async fn list_cases(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Json<Value>> {
    let reviewer = reviewer_from(&state, &headers, q.token.as_deref())?;
    let cases = blocking(move || {
        let done = state.assessments.reviewed_cases(&reviewer)?;
        Ok(state
            .cases
            .list_cases()?
            .into_iter()
            .map(|c| CaseListEntry {
                reviewed: done.contains(&c.case_id),
                case_id: c.case_id,
                sequences: c.sequences,
                n_reports: c.n_reports,
            })
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "cases": cases })))
}

/// Everything a reviewer needs to assess one case. Report identities stay on
/// the server; only slot labels and texts are sent.
#[derive(Debug, Serialize)]
pub struct CaseBundle {
    pub schema_version: u32,
    pub case_id: String,
    pub reviewer_id: String,
    pub sequences: Vec<String>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub overlays: Vec<String>,
    pub reports: Vec<BlindedReport>,
}

#[derive(Deserialize)]
struct BundleQuery {
    reviewer: Option<String>,
    token: Option<String>,
}

fn ensure_same_reviewer(authed: &str, requested: Option<&str>) -> ApiResult<()> {
    match requested {
        Some(r) if r != authed => Err(ApiError::Forbidden(format!(
            "session belongs to {authed:?}, not {r:?}"
        ))),
        _ => Ok(()),
    }
}

async fn get_case(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(case_id): Path<String>,
    Query(q): Query<BundleQuery>,
) -> ApiResult<Json<CaseBundle>> {
    let reviewer = reviewer_from(&state, &headers, q.token.as_deref())?;
    ensure_same_reviewer(&reviewer, q.reviewer.as_deref())?;
    let bundle = blocking(move || {
        let info = state.cases.case_info(&case_id)?;
        let blinded = state.cases.blinded_reports(&case_id, &reviewer)?;
        Ok(CaseBundle {
            schema_version: SCHEMA_VERSION,
            case_id,
            reviewer_id: reviewer,
            sequences: info.sequences,
            dims: info.grid.dims,
            spacing: info.grid.spacing(),
            overlays: info.overlays,
            reports: blinded.reports,
        })
    })
    .await?;
    Ok(Json(bundle))
}

#[derive(Deserialize)]
struct SliceQuery {
    seq: String,
    z: usize,
    overlays: Option<String>,
    window: Option<String>,
    token: Option<String>,
}

fn parse_window(s: &str) -> ApiResult<(f64, f64)> {
    let bad = || ApiError::BadRequest(format!("window must be \"lo,hi\", got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok((lo, hi))
}

async fn get_slice(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(case_id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    reviewer_from(&state, &headers, q.token.as_deref())?;
    let overlays: Vec<String> = q
        .overlays
        .as_deref()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if let Some(o) = overlays.iter().find(|o| !OVERLAYS.contains(&o.as_str())) {
        return Err(ApiError::BadRequest(format!(
            "unknown overlay {o:?}; expected any of {}",
            OVERLAYS.join(", ")
        )));
    }
    let req = SliceRequest {
        sequence: q.seq,
        z: q.z,
        overlays,
        window: q.window.as_deref().map(parse_window).transpose()?,
    };
    let (png, spacing) = blocking(move || {
        let (img, spacing) = state.cases.render_slice(&case_id, &req)?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok((buf.into_inner(), spacing))
    })
    .await?;
    let hv = |s: String| HeaderValue::from_str(&s).expect("numeric header");
    let mut resp = png.into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    // columns step along x, rows along y
    h.insert("x-pixel-spacing-mm", hv(format!("{},{}", spacing[0], spacing[1])));
    h.insert("x-slice-thickness-mm", hv(spacing[2].to_string()));
    Ok(resp)
}

async fn post_assessment(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let reviewer = reviewer_from(&state, &headers, None)?;
    let claimed = body.get("reviewer_id").and_then(Value::as_str);
    ensure_same_reviewer(&reviewer, claimed)?;
    let case_id = body
        .get("case_id")
        .and_then(Value::as_str)
        .ok_or_else(|| {
            ApiError::Invalid(vec![FieldError {
                field: "case_id".into(),
                message: "required non-empty string".into(),
            }])
        })?
        .to_string();

    let st = state.clone();
    let ctx = blocking(move || {
        let info = st.cases.case_info(&case_id)?;
        let slots = st.cases.blinded_reports(&case_id, &reviewer)?.slots();
        Ok(CaseContext {
            slots,
            sequences: info.sequences,
            dims: info.grid.dims,
            spacing: info.grid.spacing(),
        })
    })
    .await?;
    let assessment = validate_assessment(&body, &ctx).map_err(ApiError::Invalid)?;
    let stored = state.assessments.save(assessment).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "schema_version": SCHEMA_VERSION,
            "case_id": stored.assessment.case_id,
            "reviewer_id": stored.assessment.reviewer_id,
            "version": stored.version,
            "stored_at": stored.stored_at,
        })),
    ))
}

async fn get_assessment(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path((reviewer_id, case_id)): Path<(String, String)>,
) -> ApiResult<Response> {
    let reviewer = reviewer_from(&state, &headers, None)?;
    ensure_same_reviewer(&reviewer, Some(&reviewer_id))?;
    match state.assessments.load(&reviewer_id, &case_id)? {
        Some(s) => Ok(Json(s).into_response()),
        None => Err(ApiError::NotFound(format!(
            "no assessment of {case_id:?} by {reviewer_id:?}"
        ))),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/login", post(login))
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/slice", get(get_slice))
        .route("/api/assessments", post(post_assessment))
        .route("/api/assessments/{reviewer}/{case}", get(get_assessment))
        .with_state(state)
}

pub async fn serve(config: ReviewConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::new(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
