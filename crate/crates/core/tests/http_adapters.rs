//! HTTP adapters against small in-process servers.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use image::{imageops, Rgb, RgbImage};
use serde_json::{json, Value};

use monitorvlm_core::clause_filter::{EmbeddingKind, EmbeddingProvider, HttpEmbedder, Payload};
use monitorvlm_core::error::{BackendErrorKind, Error};
use monitorvlm_core::magnifier::{DetectorClient, Enhancer, HttpDetector, HttpEnhancer};
use monitorvlm_core::registry::ClauseRegistry;
use monitorvlm_core::remote::{decode_png_base64, png_base64};
use monitorvlm_core::types::{Frame, FrameTriplet};
use monitorvlm_core::vlm::{analyze_triplet, ChatBackend, ChatParams, ChatRequest, HttpChatBackend};

#[derive(Clone, Default)]
struct Counters {
    flaky: Arc<AtomicUsize>,
}

fn spawn(router: Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

async fn chat(headers: HeaderMap, Json(body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some("Bearer secret") {
        return Err(StatusCode::UNAUTHORIZED);
    }
    let user = &body["messages"][1]["content"];
    let images = user
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["type"] == "image")
        .count();
    let system = body["messages"][0]["content"][0]["text"].as_str().unwrap_or("");
    let verdict = if system.contains("[19]") {
        format!("{images} frames seen. [{{\"clause_id\": 19, \"violated\": true, \"reasoning\": \"phone\"}}]")
    } else {
        "[]".to_string()
    };
    Ok(Json(json!({"choices": [{"message": {"role": "assistant", "content": verdict}}]})))
}

async fn flaky(State(c): State<Counters>) -> Result<Json<Value>, StatusCode> {
    if c.flaky.fetch_add(1, Ordering::SeqCst) == 0 {
        Err(StatusCode::SERVICE_UNAVAILABLE)
    } else {
        Ok(Json(json!({"text": "[]"})))
    }
}

async fn bad_request() -> StatusCode {
    StatusCode::BAD_REQUEST
}

async fn slow() -> Json<Value> {
    tokio::time::sleep(Duration::from_secs(3)).await;
    Json(json!({"text": "[]"}))
}

async fn detect(Json(body): Json<Value>) -> Json<Value> {
    let img = decode_png_base64(body["image"].as_str().unwrap()).unwrap();
    let classes = body["classes"].as_array().unwrap().len();
    Json(json!({"detections": [
        {"box": [0, 0, img.width() / 2, img.height() / 2], "label": "worker", "confidence": 0.5 + classes as f64 / 100.0}
    ]}))
}

async fn detect_out_of_frame() -> Json<Value> {
    Json(json!({"detections": [{"box": [0, 0, 5000, 5000], "label": "worker", "confidence": 0.9}]}))
}

async fn enhance(Json(body): Json<Value>) -> Json<Value> {
    let img = decode_png_base64(body["image"].as_str().unwrap()).unwrap();
    let s = body["scale"].as_u64().unwrap() as u32;
    let up = imageops::resize(&img, img.width() * s, img.height() * s, imageops::FilterType::Nearest);
    Json(json!({"image": png_base64(&up).unwrap()}))
}

async fn embed(Json(body): Json<Value>) -> Json<Value> {
    let dim = if body.get("text").is_some() { 768 } else { 2048 };
    Json(json!({"embedding": vec![0.25; dim]}))
}

async fn embed_wrong_dim() -> Json<Value> {
    Json(json!({"embedding": [1.0, 2.0]}))
}

fn server() -> (String, Counters) {
    let counters = Counters::default();
    let router = Router::new()
        .route("/chat", post(chat))
        .route("/flaky", post(flaky))
        .route("/bad", post(bad_request))
        .route("/slow", post(slow))
        .route("/detect", post(detect))
        .route("/detect-bad", post(detect_out_of_frame))
        .route("/enhance", post(enhance))
        .route("/embed", post(embed))
        .route("/embed-bad", post(embed_wrong_dim))
        .with_state(counters.clone());
    (format!("http://{}", spawn(router)), counters)
}

fn triplet() -> FrameTriplet {
    let frames = [0u64, 1, 2].map(|i| Frame::new(i, i as f64, RgbImage::from_pixel(8, 6, Rgb([i as u8, 9, 9]))).unwrap());
    FrameTriplet::new("cam", frames).unwrap()
}

#[test]
fn chat_backend_sends_frames_and_parses_choices() {
    let (base, _) = server();
    let backend = HttpChatBackend::new(format!("{base}/chat"), "m", Duration::from_secs(5)).with_bearer(Some("secret".into()));
    let clauses = ClauseRegistry::bundled().select(&[16, 19]).unwrap();
    let result = analyze_triplet(&triplet(), &clauses, &backend, None, ChatParams::default()).unwrap();
    assert!(result.raw_text.starts_with("3 frames seen."));
    assert!(!result.verdicts[0].violated);
    assert!(result.verdicts[1].violated);
    assert!(result.latency_s >= 0.0);
}

#[test]
fn missing_token_is_a_status_error() {
    let (base, _) = server();
    let backend = HttpChatBackend::new(format!("{base}/chat"), "m", Duration::from_secs(5));
    let request = ChatRequest {
        system: "s".into(),
        user: "u".into(),
        images: vec![],
        params: ChatParams::default(),
    };
    match backend.complete(&request) {
        Err(Error::Backend { kind, endpoint, .. }) => {
            assert_eq!(kind, BackendErrorKind::Status(401));
            assert!(!kind.is_retryable());
            assert!(endpoint.ends_with("/chat"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn transient_failure_is_retried_once() {
    let (base, counters) = server();
    let backend = HttpChatBackend::new(format!("{base}/flaky"), "m", Duration::from_secs(5));
    let clauses = ClauseRegistry::bundled().select(&[16]).unwrap();
    let result = analyze_triplet(&triplet(), &clauses, &backend, None, ChatParams::default()).unwrap();
    assert_eq!(counters.flaky.load(Ordering::SeqCst), 2);
    assert!(!result.verdicts[0].violated);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, _) = server();
    let backend = HttpChatBackend::new(format!("{base}/bad"), "m", Duration::from_secs(5));
    let clauses = ClauseRegistry::bundled().select(&[16]).unwrap();
    let err = analyze_triplet(&triplet(), &clauses, &backend, None, ChatParams::default()).unwrap_err();
    assert!(matches!(err, Error::Backend { kind: BackendErrorKind::Status(400), .. }), "{err:?}");
}

#[test]
fn slow_backend_times_out() {
    let (base, _) = server();
    let backend = HttpChatBackend::new(format!("{base}/slow"), "m", Duration::from_millis(200));
    let request = ChatRequest {
        system: "s".into(),
        user: "u".into(),
        images: vec![],
        params: ChatParams::default(),
    };
    match backend.complete(&request) {
        Err(Error::Backend { kind, .. }) => assert_eq!(kind, BackendErrorKind::Timeout),
        other => panic!("{other:?}"),
    }
}

#[test]
fn detector_round_trip_and_contract_check() {
    let (base, _) = server();
    let frame = Frame::new(0, 0.0, RgbImage::new(40, 20)).unwrap();
    let vocab = vec!["worker".to_string(), "helmet".to_string()];
    let det = HttpDetector::new(format!("{base}/detect"), Duration::from_secs(5));
    let found = monitorvlm_core::magnifier::detect_checked(&det, &frame, &vocab).unwrap();
    assert_eq!(found.len(), 1);
    assert_eq!((found[0].bbox.x1, found[0].bbox.y1), (20, 10));
    assert!((found[0].confidence - 0.52).abs() < 1e-12);

    let bad = HttpDetector::new(format!("{base}/detect-bad"), Duration::from_secs(5));
    assert!(bad.detect(&frame, &vocab).is_ok());
    let err = monitorvlm_core::magnifier::detect_checked(&bad, &frame, &vocab).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
}

#[test]
fn remote_enhancer_returns_scaled_crop() {
    let (base, _) = server();
    let enhancer = HttpEnhancer::new(format!("{base}/enhance"), Duration::from_secs(5));
    let crop = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 50, y as u8 * 50, 7]));
    let up = enhancer.upscale(&crop, 2).unwrap();
    assert_eq!(up.dimensions(), (6, 4));
    assert_eq!(up.get_pixel(5, 3), crop.get_pixel(2, 1));
}

#[test]
fn remote_embedder_checks_dimensions() {
    let (base, _) = server();
    let text = HttpEmbedder::new(EmbeddingKind::Text, format!("{base}/embed"), Duration::from_secs(5));
    assert_eq!(text.embed(Payload::Text("Smoking")).unwrap().len(), 768);
    let image = HttpEmbedder::new(EmbeddingKind::Image, format!("{base}/embed"), Duration::from_secs(5));
    assert_eq!(image.embed(Payload::Image(&RgbImage::new(4, 4))).unwrap().len(), 2048);
    assert!(image.embed(Payload::Text("wrong kind")).is_err());
    let bad = HttpEmbedder::new(EmbeddingKind::Text, format!("{base}/embed-bad"), Duration::from_secs(5));
    assert!(matches!(bad.embed(Payload::Text("x")), Err(Error::Shape { .. })));
}
