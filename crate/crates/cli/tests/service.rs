use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use irap_cli::service::{router, AppState, ServiceConfig};
use irap_cli::synthesize::{generate_scenes, synthesize, SynthesizeOptions};
use irap_core::geometry::{corner_error, estimate_dlt, Correspondence, Homography};
use irap_core::image::{decode_image, PixelCoord};
use irap_core::irap::{exact_clicks, DatasetManifest, Status};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const SIDE: usize = 128;

/// Draft manifest of `count` synthetic quadruplets.
fn draft_fixture(count: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    generate_scenes(&dir.path().join("base"), 1, SIDE, 3).unwrap();
    let manifest = dir.path().join("data/manifest.json");
    let opts = SynthesizeOptions { count, seed: 3, draft: true, ..SynthesizeOptions::default() };
    synthesize(&dir.path().join("base"), &manifest, &opts).unwrap();
    (dir, manifest)
}

fn app(manifest: &Path) -> Router {
    router(AppState::load(manifest, ServiceConfig::default()).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_owned());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes, _) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn open_session(app: &Router, quad: &str) -> String {
    let (status, s) = json_call(app, "POST", "/api/sessions", Some(json!({ "quadruplet_id": quad }))).await;
    assert_eq!(status, StatusCode::CREATED);
    s["id"].as_str().unwrap().to_owned()
}

fn planted(manifest: &Path, quad: &str) -> Homography {
    DatasetManifest::load(manifest).unwrap().quadruplet(quad).unwrap().planted.unwrap()
}

async fn click_exact(app: &Router, session: &str, h: &Homography, n: usize) -> Vec<Correspondence> {
    let clicks = exact_clicks(h, SIDE, SIDE, n);
    for c in &clicks {
        let body = json!({ "a": [c.src.x, c.src.y], "b": [c.dst.x, c.dst.y] });
        let (status, _) = json_call(app, "POST", &format!("/api/sessions/{session}/clicks"), Some(body)).await;
        assert_eq!(status, StatusCode::OK);
    }
    clicks
}

fn homography(v: &Value) -> Homography {
    serde_json::from_value(v.clone()).unwrap()
}

#[tokio::test]
async fn lists_quadruplets_with_status() {
    let (_d, m) = draft_fixture(2);
    let (status, list) = json_call(&app(&m), "GET", "/api/quadruplets", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|q| q["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["q000", "q001"]);
    assert!(list.as_array().unwrap().iter().all(|q| q["status"] == "draft"));
}

#[tokio::test]
async fn seed_equals_library_dlt() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let s = open_session(&app, "q000").await;
    let clicks = vec![
        Correspondence::new(PixelCoord::new(10.0, 12.0), PixelCoord::new(14.5, 15.0)),
        Correspondence::new(PixelCoord::new(110.0, 9.0), PixelCoord::new(112.0, 13.25)),
        Correspondence::new(PixelCoord::new(115.0, 118.0), PixelCoord::new(117.0, 124.0)),
        Correspondence::new(PixelCoord::new(8.0, 100.0), PixelCoord::new(13.0, 103.0)),
    ];
    for c in &clicks {
        let body = json!({ "a": [c.src.x, c.src.y], "b": [c.dst.x, c.dst.y] });
        assert_eq!(json_call(&app, "POST", &format!("/api/sessions/{s}/clicks"), Some(body)).await.0, StatusCode::OK);
    }
    let (status, session) = json_call(&app, "POST", &format!("/api/sessions/{s}/seed"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(session["phase"], "seeded");
    let expected = estimate_dlt(&clicks).unwrap();
    assert_eq!(homography(&session["h1"]).to_row_major(), expected.to_row_major());
    assert_eq!(session["residuals"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn out_of_order_requests_conflict_and_leave_state() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let s = open_session(&app, "q000").await;
    let before = json_call(&app, "GET", &format!("/api/sessions/{s}"), None).await.1;
    for action in ["refine", "accept", "reject", "seed"] {
        let (status, body) = json_call(&app, "POST", &format!("/api/sessions/{s}/{action}"), None).await;
        assert_eq!(status, StatusCode::CONFLICT, "{action}");
        assert_eq!(body["code"], "state_conflict");
        assert!(body["message"].is_string());
    }
    assert_eq!(json_call(&app, "GET", &format!("/api/sessions/{s}"), None).await.1, before);
    let (status, _, _) = call(&app, "GET", &format!("/api/sessions/{s}/overlay"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let on_disk = DatasetManifest::load(&m).unwrap();
    assert_eq!(on_disk.quadruplet("q000").unwrap().record.status, Status::Draft);
}

#[tokio::test]
async fn full_flow_accepts_and_persists() {
    let (_d, m) = draft_fixture(2);
    let app = app(&m);
    let h = planted(&m, "q001");
    let s = open_session(&app, "q001").await;
    click_exact(&app, &s, &h, 6).await;
    assert_eq!(json_call(&app, "POST", &format!("/api/sessions/{s}/seed"), None).await.0, StatusCode::OK);
    // clicks are closed once seeded
    let late = json!({ "a": [1.0, 1.0], "b": [2.0, 2.0] });
    assert_eq!(json_call(&app, "POST", &format!("/api/sessions/{s}/clicks"), Some(late)).await.0, StatusCode::CONFLICT);

    let (status, refined) = json_call(&app, "POST", &format!("/api/sessions/{s}/refine"), None).await;
    assert_eq!(status, StatusCode::OK, "{refined}");
    assert_eq!(refined["phase"], "refined");
    assert!(corner_error(&homography(&refined["h_gt"]), &h, SIDE, SIDE).unwrap() < 1.0);
    let record = DatasetManifest::load(&m).unwrap().quadruplet("q001").unwrap().record.clone();
    assert_eq!(record.status, Status::Refined);
    assert_eq!(record.clicks.len(), 6);

    let (status, _) = json_call(&app, "POST", &format!("/api/sessions/{s}/accept"), None).await;
    assert_eq!(status, StatusCode::OK);
    let list = json_call(&app, "GET", "/api/quadruplets", None).await.1;
    let q1 = list.as_array().unwrap().iter().find(|q| q["id"] == "q001").unwrap();
    assert_eq!(q1["status"], "accepted");

    let on_disk = DatasetManifest::load(&m).unwrap();
    let rec = &on_disk.quadruplet("q001").unwrap().record;
    assert_eq!(rec.status, Status::Accepted);
    assert!(rec.residual_inlier_count >= 4);
    assert_eq!(on_disk.pairs.len(), 4);
    assert!(on_disk.pairs.iter().all(|p| p.h_gt == rec.h_gt.unwrap()));
    assert_eq!(json_call(&app, "POST", &format!("/api/sessions/{s}/reset"), None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn reject_keeps_record_out_of_pairs() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let h = planted(&m, "q000");
    let s = open_session(&app, "q000").await;
    click_exact(&app, &s, &h, 4).await;
    json_call(&app, "POST", &format!("/api/sessions/{s}/seed"), None).await;
    assert_eq!(json_call(&app, "POST", &format!("/api/sessions/{s}/refine"), None).await.0, StatusCode::OK);
    assert_eq!(json_call(&app, "POST", &format!("/api/sessions/{s}/reject"), None).await.0, StatusCode::OK);
    let on_disk = DatasetManifest::load(&m).unwrap();
    assert_eq!(on_disk.quadruplet("q000").unwrap().record.status, Status::Rejected);
    assert!(on_disk.pairs.is_empty());
}

#[tokio::test]
async fn reset_returns_to_clicking() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let s = open_session(&app, "q000").await;
    click_exact(&app, &s, &planted(&m, "q000"), 4).await;
    json_call(&app, "POST", &format!("/api/sessions/{s}/seed"), None).await;
    let (status, session) = json_call(&app, "POST", &format!("/api/sessions/{s}/reset"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(session["phase"], "clicking");
    assert!(session["clicks"].as_array().unwrap().is_empty());
    assert!(session.get("h1").is_none());
}

#[tokio::test]
async fn overlay_and_images_are_png() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let (status, bytes, ctype) = call(&app, "GET", "/api/image/q000?slot=b_nir", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(decode_image(&bytes).unwrap().width(), SIDE);

    let s = open_session(&app, "q000").await;
    click_exact(&app, &s, &planted(&m, "q000"), 4).await;
    json_call(&app, "POST", &format!("/api/sessions/{s}/seed"), None).await;
    let (status, bytes, ctype) = call(&app, "GET", &format!("/api/sessions/{s}/overlay"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let img = decode_image(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (SIDE, SIDE));
}

#[tokio::test]
async fn errors_are_json_code_and_message() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let cases = [
        ("GET", "/api/sessions/s999".to_owned(), None, StatusCode::NOT_FOUND),
        ("GET", "/api/image/nope".to_owned(), None, StatusCode::NOT_FOUND),
        ("GET", "/api/image/q000?slot=c_rgb".to_owned(), None, StatusCode::BAD_REQUEST),
        ("POST", "/api/sessions".to_owned(), Some(json!({ "quadruplet": 1 })), StatusCode::BAD_REQUEST),
        ("POST", "/api/sessions".to_owned(), Some(json!({ "quadruplet_id": "zzz" })), StatusCode::NOT_FOUND),
        ("GET", "/api/nothing".to_owned(), None, StatusCode::NOT_FOUND),
    ];
    for (method, uri, body, expected) in cases {
        let (status, v) = json_call(&app, method, &uri, body).await;
        assert_eq!(status, expected, "{method} {uri}");
        assert!(v["code"].is_string() && v["message"].is_string(), "{uri}: {v}");
    }
    let s = open_session(&app, "q000").await;
    let outside = json!({ "a": [500.0, 1.0], "b": [2.0, 2.0] });
    let (status, v) = json_call(&app, "POST", &format!("/api/sessions/{s}/clicks"), Some(outside)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "out_of_bounds");
}

#[tokio::test]
async fn degenerate_clicks_are_unprocessable() {
    let (_d, m) = draft_fixture(1);
    let app = app(&m);
    let s = open_session(&app, "q000").await;
    for k in 0..4 {
        let x = 10.0 + 20.0 * k as f64;
        let body = json!({ "a": [x, x], "b": [x, x] });
        json_call(&app, "POST", &format!("/api/sessions/{s}/clicks"), Some(body)).await;
    }
    let (status, v) = json_call(&app, "POST", &format!("/api/sessions/{s}/seed"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "degenerate_clicks");
    assert_eq!(json_call(&app, "GET", &format!("/api/sessions/{s}"), None).await.1["phase"], "clicking");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_all_persist() {
    let (_d, m) = draft_fixture(3);
    let app = Arc::new(app(&m));
    let mut tasks = Vec::new();
    for id in ["q000", "q001", "q002"] {
        let (app, h) = (app.clone(), planted(&m, id));
        tasks.push(tokio::spawn(async move {
            let s = open_session(&app, id).await;
            click_exact(&app, &s, &h, 5).await;
            for action in ["seed", "refine", "accept"] {
                let (status, v) = json_call(&app, "POST", &format!("/api/sessions/{s}/{action}"), None).await;
                assert_eq!(status, StatusCode::OK, "{id} {action}: {v}");
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let on_disk = DatasetManifest::load(&m).unwrap();
    assert_eq!(on_disk.accepted().count(), 3);
    assert_eq!(on_disk.pairs.len(), 12);
}

#[test]
fn stray_temp_file_leaves_manifest_loadable() {
    let (_d, m) = draft_fixture(1);
    let tmp = m.with_file_name(format!(".manifest.json.tmp-{}", std::process::id()));
    // a write that died half way
    let full = std::fs::read_to_string(&m).unwrap();
    std::fs::write(&tmp, &full[..full.len() / 2]).unwrap();
    let loaded = DatasetManifest::load(&m).unwrap();
    loaded.save(&m).unwrap();
    assert_eq!(DatasetManifest::load(&m).unwrap(), loaded);
    assert!(!tmp.exists());
}

#[test]
fn readers_never_see_a_partial_manifest() {
    let (_d, m) = draft_fixture(2);
    let base = DatasetManifest::load(&m).unwrap();
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let reader = {
        let (m, stop) = (m.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut reads = 0;
            while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                DatasetManifest::load(&m).expect("complete manifest");
                reads += 1;
            }
            reads
        })
    };
    for k in 0..200 {
        let mut next = base.clone();
        next.quadruplet_mut("q000").unwrap().record.clicks = exact_clicks(&Homography::identity(), SIDE, SIDE, 4 + k % 8)
            .into_iter()
            .map(|c| irap_core::irap::ClickPair { a: c.src, b: c.dst })
            .collect();
        next.save(&m).unwrap();
    }
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    assert!(reader.join().unwrap() > 0);
}
