//! HTTP labeling service for manual review of flagged clips.
//!
//! Reads never expose another annotator's label value: clip summaries list
//! who has labeled a clip, and `my_label` only echoes the caller's own label.
//! Label writes go through one mutex-guarded append-only log.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eyecue_core::dataset::annotation::protocol_rows;
use eyecue_core::dataset::density::{clip_map, whole_video_map};
use eyecue_core::dataset::frames::{encode_png, load_clip_frames};
use eyecue_core::dataset::{
    read_manifest, Aggregation, AnnotationRecord, AnnotationStore, Catalog, ClipRecord, DensityMap,
    Label, MapSpec,
};
use eyecue_core::geometry::{render_dot_overlay, render_heatmap_mask, Preprocessing};
use eyecue_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliResult;
use crate::run::now_ms;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

pub struct AppState {
    manifest: PathBuf,
    catalog: Catalog,
    store: Mutex<AnnotationStore>,
    spec: MapSpec,
}

impl AppState {
    pub fn new(manifest: PathBuf, catalog: Catalog, store: AnnotationStore) -> Self {
        Self {
            manifest,
            catalog,
            store: Mutex::new(store),
            spec: MapSpec::default(),
        }
    }

    /// Loads the manifest and replays the label log.
    pub fn open(manifest: &Path, labels: &Path) -> CliResult<Self> {
        let catalog = Catalog::new(read_manifest(manifest)?)?;
        let store = AnnotationStore::open(labels)?;
        Ok(Self::new(manifest.to_path_buf(), catalog, store))
    }

    fn store(&self) -> std::sync::MutexGuard<'_, AnnotationStore> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn clip(&self, id: &str) -> Result<&ClipRecord, ApiError> {
        self.catalog
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown clip {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/clips", get(list_clips))
        .route("/api/clips/{id}", get(clip_detail))
        .route("/api/clips/{id}/frames/{t}", get(frame_image))
        .route("/api/clips/{id}/label", post(post_label))
        .route("/api/agreement", get(agreement))
        .route("/api/protocol", get(protocol))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> CliResult<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| crate::error::CliError::Usage(format!("cannot bind {addr}: {e}")))?;
    let local = listener.local_addr().map_err(crate::error::CliError::internal)?;
    println!("labeling service listening on http://{local}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(crate::error::CliError::internal)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Policy(_) => StatusCode::CONFLICT,
            e if e.is_user_error() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum StatusFilter {
    #[default]
    Flagged,
    All,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListQuery {
    #[serde(default)]
    status: StatusFilter,
    unlabeled_by: Option<String>,
    /// Caller identity; only used to echo the caller's own label.
    annotator: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ClipSummary {
    clip_id: String,
    video_id: Option<String>,
    cc: Option<f64>,
    flagged: bool,
    scene: String,
    time_of_day: String,
    weather: String,
    labeled_by: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    my_label: Option<Label>,
}

#[derive(Debug, Serialize)]
struct ClipPage {
    page: usize,
    page_size: usize,
    total: usize,
    items: Vec<ClipSummary>,
}

async fn list_clips(
    State(state): State<Arc<AppState>>,
    query: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<ClipPage>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page must be >= 1 and page_size in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let store = state.store();
    let latest = store.latest();
    let matching: Vec<ClipSummary> = state
        .catalog
        .clips()
        .iter()
        .filter(|c| matches!(q.status, StatusFilter::All) || c.flagged)
        .filter_map(|c| {
            let by = latest.get(c.clip_id.as_str());
            if let (Some(a), Some(by)) = (&q.unlabeled_by, by) {
                if by.contains_key(a.as_str()) {
                    return None;
                }
            }
            let labeled_by = by.map(|m| m.keys().map(|k| k.to_string()).collect()).unwrap_or_default();
            let my_label = q
                .annotator
                .as_deref()
                .and_then(|a| by.and_then(|m| m.get(a)).map(|r| r.label));
            Some(ClipSummary {
                clip_id: c.clip_id.clone(),
                video_id: c.video_id.clone(),
                cc: c.cc,
                flagged: c.flagged,
                scene: c.scene.to_string(),
                time_of_day: c.time_of_day.to_string(),
                weather: c.weather.to_string(),
                labeled_by,
                my_label,
            })
        })
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .collect();
    Ok(Json(ClipPage { page, page_size, total, items }))
}

#[derive(Debug, Serialize)]
struct ClipDetail {
    clip_id: String,
    video_id: Option<String>,
    scene: String,
    time_of_day: String,
    weather: String,
    cc: Option<f64>,
    flagged: bool,
    degenerate: bool,
    frame_urls: Vec<String>,
    /// Normalized (x, y) per frame.
    gaze: Vec<[f32; 2]>,
    clip_density: DensityMap,
    video_density: DensityMap,
    labeled_by: Vec<String>,
}

async fn clip_detail(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ClipDetail>, ApiError> {
    let clip = state.clip(&id)?;
    let siblings: Vec<ClipRecord> = match &clip.video_id {
        Some(video) => state
            .catalog
            .clips()
            .iter()
            .filter(|c| c.video_id.as_ref() == Some(video))
            .cloned()
            .collect(),
        None => vec![clip.clone()],
    };
    let labeled_by = state.store().labels_for(&id).into_keys().collect();
    Ok(Json(ClipDetail {
        clip_id: clip.clip_id.clone(),
        video_id: clip.video_id.clone(),
        scene: clip.scene.to_string(),
        time_of_day: clip.time_of_day.to_string(),
        weather: clip.weather.to_string(),
        cc: clip.cc,
        flagged: clip.flagged,
        degenerate: clip.degenerate,
        frame_urls: (0..clip.frame_count())
            .map(|t| format!("/api/clips/{}/frames/{t}", clip.clip_id))
            .collect(),
        gaze: clip.gaze.points().iter().map(|p| [p.x, p.y]).collect(),
        clip_density: clip_map(clip, state.spec)?,
        video_density: whole_video_map(&siblings, state.spec, Aggregation::default())?,
        labeled_by,
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Overlay {
    #[default]
    None,
    Dot,
    Heatmap,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameQuery {
    #[serde(default)]
    overlay: Overlay,
    /// Overlay radius in frame pixels.
    radius: Option<f32>,
}

async fn frame_image(
    State(state): State<Arc<AppState>>,
    UrlPath((id, t)): UrlPath<(String, usize)>,
    query: Result<Query<FrameQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let clip = state.clip(&id)?.clone();
    if t >= clip.frame_count() {
        return Err(ApiError::not_found(format!(
            "clip {id} has {} frames, no frame {t}",
            clip.frame_count()
        )));
    }
    if q.radius.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
        return Err(ApiError::bad_request("radius must be positive"));
    }
    let manifest = state.manifest.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, Error> {
        let frames = load_clip_frames(&manifest, &clip)?;
        let gaze = clip.gaze.points()[t];
        let frame = match q.overlay {
            Overlay::None => frames[t].clone(),
            Overlay::Dot => render_dot_overlay(
                &frames[t],
                gaze,
                q.radius.unwrap_or(Preprocessing::DEFAULT_DOT_RADIUS),
            ),
            Overlay::Heatmap => render_heatmap_mask(
                &frames[t],
                gaze,
                q.radius.unwrap_or(Preprocessing::DEFAULT_HEATMAP_RADIUS),
                Preprocessing::DEFAULT_HEATMAP_FLOOR,
            ),
        };
        encode_png(&frame)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
    })??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    annotator_id: String,
    label: Label,
    #[serde(default)]
    protocol_row: Option<usize>,
}

async fn post_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    state.clip(&id)?;
    let body: LabelBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed label body: {e}")))?;
    let record = AnnotationRecord {
        clip_id: id,
        annotator_id: body.annotator_id,
        label: body.label,
        timestamp: now_ms(),
        protocol_row: body.protocol_row,
    };
    state.store().record_label(&state.catalog, record.clone())?;
    Ok((StatusCode::CREATED, Json(record)))
}

/// "49/50 = 98.0%", or a notice when no clip has two annotators yet.
pub fn agreement_display(matching: usize, eligible: usize) -> String {
    if eligible == 0 {
        "insufficient labels".to_string()
    } else {
        format!("{matching}/{eligible} = {:.1}%", 100.0 * matching as f64 / eligible as f64)
    }
}

async fn agreement(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let store = state.store();
    let report = store.agreement();
    let final_labels: BTreeMap<String, Label> = report
        .disagreements
        .iter()
        .filter_map(|d| store.final_label(&d.clip_id).map(|l| (d.clip_id.clone(), l)))
        .collect();
    drop(store);
    Json(json!({
        "eligible": report.eligible,
        "matching": report.matching,
        "fraction": report.fraction,
        "display": agreement_display(report.matching, report.eligible),
        "disagreements": report.disagreements,
        "adjudicated": final_labels,
    }))
}

async fn protocol() -> Json<serde_json::Value> {
    Json(json!({ "rows": protocol_rows() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_display_formats() {
        assert_eq!(agreement_display(49, 50), "49/50 = 98.0%");
        assert_eq!(agreement_display(0, 0), "insufficient labels");
    }
}
