use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use eyecue_cli::service::{router, AppState};
use eyecue_core::dataset::frames::{read_image, write_packed};
use eyecue_core::dataset::{
    write_manifest, ClipRecord, FrameSource, Label, Scene, SourceDataset, TimeOfDay, Weather,
};
use eyecue_core::geometry::{FrameImage, GazePoint, GazeTrack, DOT_COLOR};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const FLAGGED: usize = 50;
const FRAME_SIDE: usize = 64;

fn clip(i: usize, flagged: bool) -> ClipRecord {
    ClipRecord {
        clip_id: format!("clip{i:03}"),
        video_id: Some(format!("rec{}", i / 8)),
        source_dataset: SourceDataset::BddA,
        scene: Scene::City,
        time_of_day: TimeOfDay::Day,
        weather: Weather::Sunny,
        frames: FrameSource::Packed {
            packed: format!("frames/clip{i:03}.f32"),
        },
        gaze: GazeTrack(
            (0..4)
                .map(|t| GazePoint::new(0.1 + 0.01 * t as f32, 0.1).unwrap())
                .collect(),
        ),
        cc: Some(if flagged { 0.1 } else { 0.8 }),
        flagged,
        degenerate: false,
        label: Label::Unlabeled,
    }
}

/// 50 flagged clips and 2 unflagged ones, with packed gray frames.
fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    std::fs::create_dir_all(dir.join("frames")).unwrap();
    let clips: Vec<ClipRecord> = (0..FLAGGED + 2).map(|i| clip(i, i < FLAGGED)).collect();
    let frames = vec![FrameImage::filled(FRAME_SIDE, FRAME_SIDE, [0.5, 0.5, 0.5]); 4];
    for c in &clips {
        write_packed(&frames, &dir.join(format!("frames/{}.f32", c.clip_id))).unwrap();
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&clips, &manifest).unwrap();
    (manifest, dir.join("labels.jsonl"))
}

fn app(manifest: &Path, labels: &Path) -> axum::Router {
    router(Arc::new(AppState::open(manifest, labels).unwrap()))
}

async fn send(app: &axum::Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json(app: &axum::Router, uri: &str) -> Value {
    let (status, body) = send(app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn label(app: &axum::Router, clip: &str, annotator: &str, label: &str) -> (StatusCode, Value) {
    let body = json!({ "annotator_id": annotator, "label": label, "protocol_row": 0 }).to_string();
    let (status, bytes) = send(app, Method::POST, &format!("/api/clips/{clip}/label"), Some(&body)).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn label_session(app: &axum::Router) {
    for i in 0..FLAGGED {
        let id = format!("clip{i:03}");
        let (s, _) = label(app, &id, "ann_a", "distracted").await;
        assert_eq!(s, StatusCode::CREATED);
        let second = if i == 7 { "attentive" } else { "distracted" };
        let (s, _) = label(app, &id, "ann_b", second).await;
        assert_eq!(s, StatusCode::CREATED);
    }
}

#[tokio::test]
async fn agreement_counts_forty_nine_of_fifty() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    assert_eq!(get_json(&app, "/api/agreement").await["display"], "insufficient labels");
    label_session(&app).await;
    let report = get_json(&app, "/api/agreement").await;
    assert_eq!(report["eligible"], 50);
    assert_eq!(report["matching"], 49);
    assert_eq!(report["display"], "49/50 = 98.0%");
    let disagreements = report["disagreements"].as_array().unwrap();
    assert_eq!(disagreements.len(), 1);
    assert_eq!(disagreements[0]["clip_id"], "clip007");

    let (s, _) = label(&app, "clip007", "expert", "attentive").await;
    assert_eq!(s, StatusCode::CREATED);
    let report = get_json(&app, "/api/agreement").await;
    assert_eq!(report["matching"], 49, "expert labels do not count toward agreement");
    assert_eq!(report["adjudicated"]["clip007"], "attentive");
}

#[tokio::test]
async fn labels_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let manifest_before = std::fs::read(&manifest).unwrap();
    {
        let app = app(&manifest, &labels);
        label_session(&app).await;
    }
    let app = app(&manifest, &labels);
    assert_eq!(get_json(&app, "/api/agreement").await["display"], "49/50 = 98.0%");
    let page = get_json(&app, "/api/clips?unlabeled_by=ann_a").await;
    assert_eq!(page["total"], 0);
    let page = get_json(&app, "/api/clips?unlabeled_by=ann_c").await;
    assert_eq!(page["total"], 50);
    assert_eq!(std::fs::read(&manifest).unwrap(), manifest_before, "manifest is never rewritten");
    assert_eq!(std::fs::read_to_string(&labels).unwrap().lines().count(), 100);
}

#[tokio::test]
async fn unflagged_clip_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let (s, body) = label(&app, "clip050", "ann_a", "attentive").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("not flagged"));
    assert!(std::fs::read_to_string(&labels).unwrap().is_empty());
}

#[tokio::test]
async fn malformed_bodies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let uri = "/api/clips/clip000/label";
    for body in [
        "not json",
        "{}",
        r#"{"annotator_id": "a"}"#,
        r#"{"annotator_id": "a", "label": "sleepy"}"#,
        r#"{"annotator_id": "a", "label": "unlabeled"}"#,
        r#"{"annotator_id": "", "label": "attentive"}"#,
        r#"{"annotator_id": "a", "label": "attentive", "protocol_row": 999}"#,
        r#"{"annotator_id": "a", "label": "attentive", "extra": 1}"#,
    ] {
        let (status, bytes) = send(&app, Method::POST, uri, Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}: {}", String::from_utf8_lossy(&bytes));
    }
    let (status, _) = send(&app, Method::POST, "/api/clips/nope/label", Some("{}")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(std::fs::read_to_string(&labels).unwrap().is_empty());
}

#[tokio::test]
async fn accepted_label_echoes_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let (s, record) = label(&app, "clip003", "ann_a", "erroneous").await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(record["clip_id"], "clip003");
    assert_eq!(record["label"], "erroneous");
    assert_eq!(record["protocol_row"], 0);
    assert!(record["timestamp"].as_u64().unwrap() > 1_600_000_000_000);
}

#[tokio::test]
async fn summaries_hide_other_annotators_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    label(&app, "clip000", "ann_a", "distracted").await;

    let page = get_json(&app, "/api/clips?annotator=ann_b&page_size=1").await;
    let item = &page["items"][0];
    assert_eq!(item["clip_id"], "clip000");
    assert_eq!(item["labeled_by"], json!(["ann_a"]));
    assert!(item.get("my_label").is_none());
    assert!(!page.to_string().contains("distracted"));

    let page = get_json(&app, "/api/clips?annotator=ann_a&page_size=1").await;
    assert_eq!(page["items"][0]["my_label"], "distracted");

    let detail = get_json(&app, "/api/clips/clip000").await;
    assert!(!detail.to_string().contains("distracted"));
}

#[tokio::test]
async fn listing_filters_and_pages() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let page = get_json(&app, "/api/clips?status=flagged&page=2&page_size=20").await;
    assert_eq!(page["total"], 50);
    assert_eq!(page["items"].as_array().unwrap().len(), 20);
    assert_eq!(page["items"][0]["clip_id"], "clip020");
    assert_eq!(page["items"][0]["scene"], "city");
    let page = get_json(&app, "/api/clips?status=all&page=3&page_size=20").await;
    assert_eq!(page["total"], 52);
    assert_eq!(page["items"].as_array().unwrap().len(), 12);
    for bad in ["/api/clips?page=0", "/api/clips?page_size=0", "/api/clips?status=some", "/api/clips?bogus=1"] {
        let (status, _) = send(&app, Method::GET, bad, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn clip_detail_has_frames_gaze_and_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let detail = get_json(&app, "/api/clips/clip009").await;
    assert_eq!(detail["frame_urls"].as_array().unwrap().len(), 4);
    assert_eq!(detail["frame_urls"][3], "/api/clips/clip009/frames/3");
    assert_eq!(detail["gaze"].as_array().unwrap().len(), 4);
    assert_eq!(detail["cc"], 0.1);
    for key in ["clip_density", "video_density"] {
        let map = &detail[key];
        let values = map["values"].as_array().unwrap();
        assert_eq!(values.len(), 64 * 36);
        let mass: f64 = values.iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((mass - 1.0).abs() < 1e-9, "{key} mass {mass}");
    }
    let (status, _) = send(&app, Method::GET, "/api/clips/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

async fn frame(app: &axum::Router, dir: &Path, uri: &str) -> FrameImage {
    let (status, bytes) = send(app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let path = dir.join("frame.png");
    std::fs::write(&path, bytes).unwrap();
    read_image(&path).unwrap()
}

#[tokio::test]
async fn frames_render_with_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let gaze = GazePoint::new(0.1, 0.1).unwrap().to_pixel(FRAME_SIDE, FRAME_SIDE);

    let raw = frame(&app, dir.path(), "/api/clips/clip001/frames/0").await;
    assert_eq!((raw.width, raw.height), (FRAME_SIDE, FRAME_SIDE));
    assert!((raw.pixel(gaze.0, gaze.1)[0] - 0.5).abs() < 0.01);

    let dot = frame(&app, dir.path(), "/api/clips/clip001/frames/0?overlay=dot").await;
    assert_eq!(dot.pixel(gaze.0, gaze.1), DOT_COLOR);
    assert_eq!(dot.pixel(gaze.0 + 19, gaze.1), DOT_COLOR, "default radius is 20 px");
    assert!((dot.pixel(gaze.0 + 22, gaze.1)[0] - 0.5).abs() < 0.01);

    let small = frame(&app, dir.path(), "/api/clips/clip001/frames/0?overlay=dot&radius=5").await;
    assert_ne!(small.pixel(gaze.0 + 10, gaze.1), DOT_COLOR);

    let heat = frame(&app, dir.path(), "/api/clips/clip001/frames/0?overlay=heatmap").await;
    let center = heat.pixel(gaze.0, gaze.1)[0];
    let far = heat.pixel(FRAME_SIDE - 1, FRAME_SIDE - 1)[0];
    assert!(center > far, "mask darkens away from the gaze: {center} vs {far}");

    for (uri, expected) in [
        ("/api/clips/clip001/frames/4", StatusCode::NOT_FOUND),
        ("/api/clips/clip001/frames/x", StatusCode::BAD_REQUEST),
        ("/api/clips/clip001/frames/0?overlay=blur", StatusCode::BAD_REQUEST),
        ("/api/clips/clip001/frames/0?overlay=dot&radius=-1", StatusCode::BAD_REQUEST),
    ] {
        let (status, _) = send(&app, Method::GET, uri, None).await;
        assert_eq!(status, expected, "{uri}");
    }
}

#[tokio::test]
async fn protocol_rows_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = fixture(dir.path());
    let app = app(&manifest, &labels);
    let protocol = get_json(&app, "/api/protocol").await;
    let rows = protocol["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    for key in ["id", "scene", "driving_behavior", "gaze_behavior", "label"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }
}
