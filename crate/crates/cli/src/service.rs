//! REST service backing the annotation UI.
//!
//! Sessions walk `clicking -> seeded -> refined -> accepted | rejected`.
//! Requests that do not fit the current phase get a 409 and leave the
//! session untouched. Each session is guarded by its own async mutex, so
//! mutations of one session are serialized while different sessions proceed
//! independently. Readers see the manifest through an immutable snapshot
//! that is swapped after every successful persist.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use irap_core::geometry::{Correspondence, Homography, RansacConfig};
use irap_core::image::{encode_png, Image, PixelCoord};
use irap_core::irap::{
    compose_gt, refine_residual, seed_homography, AnnotationRecord, ClickPair, DatasetManifest, IrapError, Slot, Status,
};
use irap_core::matcher::{GridMatcher, MatcherConfig};
use irap_core::warp::warp_perspective;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::error::CommandError;
use crate::{load_manifest, load_slot};

#[derive(Debug, Clone, Copy, Default)]
pub struct ServiceConfig {
    pub matcher: MatcherConfig,
    pub ransac: RansacConfig,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "state_conflict", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { code: self.code, message: &self.message })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl From<IrapError> for ApiError {
    fn from(e: IrapError) -> Self {
        Self::internal(e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Clicking,
    Seeded,
    Refined,
    Accepted,
    Rejected,
}

impl Phase {
    fn is_terminal(self) -> bool {
        matches!(self, Phase::Accepted | Phase::Rejected)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Session {
    pub id: String,
    pub quadruplet_id: String,
    pub phase: Phase,
    pub clicks: Vec<ClickPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h1: Option<Homography>,
    /// Per-click transfer residuals of `h1`.
    pub residuals: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2: Option<Homography>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_gt: Option<Homography>,
    pub residual_inlier_count: usize,
    #[serde(skip)]
    a_rgb: Arc<Image>,
    #[serde(skip)]
    b_rgb: Arc<Image>,
}

impl Session {
    fn require(&self, phases: &[Phase], action: &str) -> ApiResult<()> {
        if phases.contains(&self.phase) {
            Ok(())
        } else {
            Err(ApiError::conflict(format!("cannot {action} in phase {:?}", self.phase)))
        }
    }
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    manifest_path: PathBuf,
    manifest: RwLock<Arc<DatasetManifest>>,
    /// Serializes manifest persistence across sessions.
    writer: tokio::sync::Mutex<()>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    next_session: AtomicU64,
    config: ServiceConfig,
}

impl AppState {
    pub fn load(manifest_path: &Path, config: ServiceConfig) -> Result<Arc<Self>, CommandError> {
        let manifest = load_manifest(manifest_path)?;
        Ok(Arc::new(Self {
            manifest_path: manifest_path.to_path_buf(),
            manifest: RwLock::new(Arc::new(manifest)),
            writer: tokio::sync::Mutex::new(()),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            config,
        }))
    }

    pub fn snapshot(&self) -> Arc<DatasetManifest> {
        self.manifest.read().expect("manifest lock").clone()
    }

    fn session(&self, id: &str) -> ApiResult<SessionHandle> {
        self.sessions.lock().expect("session table").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    /// Applies `edit` to a copy of the manifest, writes it atomically and
    /// publishes it.
    async fn persist(&self, edit: impl FnOnce(&mut DatasetManifest) -> Result<(), IrapError>) -> ApiResult<()> {
        let _guard = self.writer.lock().await;
        let mut next = (*self.snapshot()).clone();
        edit(&mut next)?;
        next.rebuild_pairs()?;
        next.save(&self.manifest_path)?;
        *self.manifest.write().expect("manifest lock") = Arc::new(next);
        Ok(())
    }
}

fn mutate_record<'a>(
    id: &'a str,
    f: impl FnOnce(&mut AnnotationRecord) + 'a,
) -> impl FnOnce(&mut DatasetManifest) -> Result<(), IrapError> + 'a {
    move |m: &mut DatasetManifest| {
        let q = m.quadruplet_mut(id).ok_or_else(|| IrapError::Manifest(format!("quadruplet {id} disappeared")))?;
        f(&mut q.record);
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/quadruplets", get(list_quadruplets))
        .route("/api/image/{id}", get(get_image))
        .route("/api/sessions", get(list_sessions).post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/clicks", post(add_click))
        .route("/api/sessions/{id}/seed", post(seed))
        .route("/api/sessions/{id}/refine", post(refine))
        .route("/api/sessions/{id}/overlay", get(overlay))
        .route("/api/sessions/{id}/accept", post(accept))
        .route("/api/sessions/{id}/reject", post(reject))
        .route("/api/sessions/{id}/reset", post(reset))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(manifest_path: &Path, addr: &str, config: ServiceConfig) -> Result<(), CommandError> {
    let state = AppState::load(manifest_path, config)?;
    let listener = TcpListener::bind(addr).await.map_err(|source| CommandError::Bind { addr: addr.to_owned(), source })?;
    log::info!("serving {} on {}", manifest_path.display(), listener.local_addr().map_err(anyhow::Error::from)?);
    axum::serve(listener, router(state)).await.map_err(anyhow::Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct QuadrupletSummary {
    id: String,
    scene: String,
    status: Status,
}

async fn list_quadruplets(State(state): State<Arc<AppState>>) -> Json<Vec<QuadrupletSummary>> {
    let m = state.snapshot();
    Json(
        m.scenes
            .iter()
            .flat_map(|s| {
                s.quadruplets.iter().map(move |q| QuadrupletSummary { id: q.id.clone(), scene: s.name.clone(), status: q.record.status })
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct ImageQuery {
    slot: Option<String>,
}

fn png_response(img: &Image) -> ApiResult<Response> {
    let bytes = encode_png(img).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<ImageQuery>) -> ApiResult<Response> {
    let slot_name = q.slot.as_deref().unwrap_or("a_rgb");
    let slot =
        Slot::parse(slot_name).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("unknown slot {slot_name}")))?;
    let m = state.snapshot();
    let quad = m.quadruplet(&id).ok_or_else(|| ApiError::not_found(format!("no quadruplet {id}")))?;
    let img = load_slot(&state.manifest_path, quad, slot).map_err(|e| ApiError::internal(e.to_string()))?;
    png_response(&img)
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<Session>> {
    let handles: Vec<SessionHandle> = state.sessions.lock().expect("session table").values().cloned().collect();
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        out.push(h.lock().await.clone());
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

#[derive(Deserialize)]
struct CreateSession {
    quadruplet_id: String,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Session>)> {
    let Json(body) = body?;
    let m = state.snapshot();
    let quad = m.quadruplet(&body.quadruplet_id).ok_or_else(|| ApiError::not_found(format!("no quadruplet {}", body.quadruplet_id)))?;
    let load = |slot| load_slot(&state.manifest_path, quad, slot).map(Arc::new).map_err(|e| ApiError::internal(e.to_string()));
    let (a_rgb, b_rgb) = (load(Slot::ARgb)?, load(Slot::BRgb)?);
    let id = format!("s{}", state.next_session.fetch_add(1, Ordering::Relaxed));
    let session = Session {
        id: id.clone(),
        quadruplet_id: quad.id.clone(),
        phase: Phase::Clicking,
        clicks: Vec::new(),
        h1: None,
        residuals: Vec::new(),
        h2: None,
        h_gt: None,
        residual_inlier_count: 0,
        a_rgb,
        b_rgb,
    };
    state.sessions.lock().expect("session table").insert(id, Arc::new(tokio::sync::Mutex::new(session.clone())));
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    Ok(Json(state.session(&id)?.lock().await.clone()))
}

fn inside(img: &Image, p: PixelCoord) -> bool {
    p.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= (img.width() - 1) as f64 && p.y <= (img.height() - 1) as f64
}

async fn add_click(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ClickPair>, JsonRejection>,
) -> ApiResult<Json<Session>> {
    let Json(click) = body?;
    let handle = state.session(&id)?;
    let mut s = handle.lock().await;
    s.require(&[Phase::Clicking], "add clicks")?;
    if !inside(&s.a_rgb, click.a) || !inside(&s.b_rgb, click.b) {
        return Err(ApiError::unprocessable("out_of_bounds", "click lies outside its image"));
    }
    s.clicks.push(click);
    Ok(Json(s.clone()))
}

async fn seed(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    let handle = state.session(&id)?;
    let mut s = handle.lock().await;
    s.require(&[Phase::Clicking], "seed")?;
    if s.clicks.len() < 4 {
        return Err(ApiError::conflict(format!("seeding needs 4 click pairs, have {}", s.clicks.len())));
    }
    let corrs: Vec<Correspondence> = s.clicks.iter().map(|&c| c.into()).collect();
    let seeded = seed_homography(&corrs).map_err(|e| ApiError::unprocessable("degenerate_clicks", e.to_string()))?;
    s.h1 = Some(seeded.h1);
    s.residuals = seeded.residuals;
    s.phase = Phase::Seeded;
    Ok(Json(s.clone()))
}

async fn refine(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    let handle = state.session(&id)?;
    let mut s = handle.lock().await;
    s.require(&[Phase::Seeded], "refine")?;
    let h1 = s.h1.expect("seeded sessions have h1");
    let (a, b, config) = (s.a_rgb.clone(), s.b_rgb.clone(), state.config);
    let result = tokio::task::spawn_blocking(move || refine_residual(&a, &b, &h1, &GridMatcher::new(config.matcher), &config.ransac))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let residual = result.map_err(|e| ApiError::unprocessable("refine_failed", e.to_string()))?;
    let h_gt = compose_gt(&residual.h2, &h1).map_err(|e| ApiError::unprocessable("refine_failed", e.to_string()))?;
    let inliers = residual.ransac.inlier_count();
    let clicks = s.clicks.clone();
    state
        .persist(mutate_record(&s.quadruplet_id, |r| {
            r.h1 = Some(h1);
            r.h2 = Some(residual.h2);
            r.h_gt = Some(h_gt);
            r.clicks = clicks;
            r.residual_inlier_count = inliers;
            r.status = Status::Refined;
        }))
        .await?;
    s.h2 = Some(residual.h2);
    s.h_gt = Some(h_gt);
    s.residual_inlier_count = inliers;
    s.phase = Phase::Refined;
    Ok(Json(s.clone()))
}

async fn overlay(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = state.session(&id)?.lock().await.clone();
    s.require(&[Phase::Seeded, Phase::Refined, Phase::Accepted], "render an overlay")?;
    let h = s.h_gt.or(s.h1).expect("seeded sessions have h1");
    let warped = warp_perspective(&s.a_rgb, &h, s.b_rgb.width(), s.b_rgb.height())
        .map_err(|e| ApiError::unprocessable("singular", e.to_string()))?;
    png_response(&warped.image)
}

async fn decide(state: Arc<AppState>, id: String, accept: bool) -> ApiResult<Json<Session>> {
    let handle = state.session(&id)?;
    let mut s = handle.lock().await;
    s.require(&[Phase::Refined], if accept { "accept" } else { "reject" })?;
    if accept && s.residual_inlier_count < 4 {
        return Err(ApiError::conflict("accepting needs at least 4 residual inliers"));
    }
    let status = if accept { Status::Accepted } else { Status::Rejected };
    state.persist(mutate_record(&s.quadruplet_id, |r| r.status = status)).await?;
    s.phase = if accept { Phase::Accepted } else { Phase::Rejected };
    Ok(Json(s.clone()))
}

async fn accept(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    decide(state, id, true).await
}

async fn reject(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    decide(state, id, false).await
}

async fn reset(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    let handle = state.session(&id)?;
    let mut s = handle.lock().await;
    if s.phase.is_terminal() {
        return Err(ApiError::conflict(format!("session is {:?}", s.phase)));
    }
    s.clicks.clear();
    s.h1 = None;
    s.residuals.clear();
    s.h2 = None;
    s.h_gt = None;
    s.residual_inlier_count = 0;
    s.phase = Phase::Clicking;
    Ok(Json(s.clone()))
}
