//! Kept in its own binary so no other test competes for the CPU while timing.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use verse_core::config::ModelConfig;
use verse_core::dataio::{encode_gray16, synthesize_all, GenSpec};
use verse_core::Verse32;
use verse_service::{router, AppState};

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::builder().method("POST").uri(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap()
}

#[tokio::test]
async fn add_click_under_half_a_second_at_256() {
    let model = Verse32::new(ModelConfig { num_targets: 3, ..ModelConfig::desk() }, 0).unwrap();
    let app = router(Arc::new(AppState::new(model, BTreeMap::new())));
    let s = synthesize_all(&GenSpec { n_samples: 1, image_size: 256, ..Default::default() }).unwrap().remove(0);
    let png = encode_gray16(256, 256, s.image.data()).unwrap();
    let req = Request::builder().method("POST").uri("/sessions").header(header::CONTENT_TYPE, "image/png").body(Body::from(png)).unwrap();
    let (status, v) = send(&app, req).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(256), Some(256)));
    let id = v["session_id"].as_str().unwrap().to_string();
    let (status, _) = send(&app, post(&format!("/sessions/{id}/targets/0/auto"), Value::Null)).await;
    assert_eq!(status, StatusCode::OK);

    let mut times = Vec::new();
    for (x, y) in [(100, 100), (140, 90), (60, 170), (200, 40), (30, 220)] {
        let t = Instant::now();
        let (status, _) = send(&app, post(&format!("/sessions/{id}/targets/0/clicks"), json!({"x": x, "y": y, "polarity": "pos"}))).await;
        times.push(t.elapsed().as_secs_f64());
        assert_eq!(status, StatusCode::OK);
    }
    let worst = times.iter().cloned().fold(0.0, f64::max);
    println!("add_click seconds: {times:.3?}");
    assert!(worst < 0.5, "add_click took {worst:.3} s");
}
