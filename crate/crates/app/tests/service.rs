use std::io::Cursor;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use genmatte::config::EngineConfig;
use genmatte::io::load_gray_bytes;
use genmatte::service::{router, MatteReply};
use genmatte::Engine;
use genmatte_core::synthetic::{scene, SceneKind};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_config() -> EngineConfig {
    EngineConfig::from_json(
        r#"{
            "codec": {"factor": 4},
            "hires": {"ensemble": 4, "patch_size": 8, "overlap": 2, "feather": 2, "lr_long_side": 48}
        }"#,
    )
    .unwrap()
}

fn app(cfg: EngineConfig) -> Router {
    router(Arc::new(Engine::new(cfg).unwrap()))
}

fn png8(t: &genmatte_core::Tensor3) -> Vec<u8> {
    let (w, h) = (t.width(), t.height());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (t.get(c.min(t.channels() - 1), y, x) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn gray_png(values: &[u8], w: u32, h: u32) -> Vec<u8> {
    let img = image::GrayImage::from_raw(w, h, values.to_vec()).unwrap();
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn test_image() -> (Vec<u8>, usize, usize) {
    let s = scene(SceneKind::ThresholdDiscs, 60, 90, 3).unwrap();
    (png8(s.image.tensor()), 60, 90)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/v1/matte")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schema/");
    let text = std::fs::read_to_string(format!("{path}{name}")).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

#[tokio::test]
async fn health_and_config() {
    let app = app(small_config());
    let (status, body) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
    let (status, body) = call(&app, get("/v1/config")).await;
    assert_eq!(status, StatusCode::OK);
    let cfg: EngineConfig = serde_json::from_value(body).unwrap();
    assert_eq!(cfg, small_config());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_answers_while_matting() {
    let app = app(small_config());
    let (img, _, _) = test_image();
    let body = json!({ "image": B64.encode(&img), "hr": true }).to_string();
    let pending = tokio::spawn({
        let app = app.clone();
        async move { call(&app, post(body)).await }
    });
    let (status, _) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = pending.await.unwrap();
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn identical_requests_give_identical_alpha() {
    let app = app(small_config());
    let (img, h, w) = test_image();
    let body = json!({ "image": B64.encode(&img), "seed": 11, "hr": true, "diagnostics": true }).to_string();
    let (s1, a) = call(&app, post(body.clone())).await;
    let (s2, b) = call(&app, post(body)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["alpha"], b["alpha"]);
    assert!(schema("matte-response.schema.json").is_valid(&a));
    let reply: MatteReply = serde_json::from_value(a).unwrap();
    assert_eq!(reply.latent_f, 4);
    assert!(reply.uncertainty.is_some() && reply.boxes.is_some());
    let alpha = load_gray_bytes(&B64.decode(reply.alpha).unwrap()).unwrap();
    assert_eq!((alpha.height(), alpha.width()), (h, w));
}

#[tokio::test]
async fn trimap_known_regions_are_honoured() {
    let app = app(small_config());
    let (img, h, w) = test_image();
    // left third known background, right third known foreground, whatever the image says
    let tri: Vec<u8> = (0..h * w)
        .map(|i| match (i % w) * 3 / w {
            0 => 0,
            1 => 128,
            _ => 255,
        })
        .collect();
    let body = json!({ "image": B64.encode(&img), "trimap": B64.encode(gray_png(&tri, w as u32, h as u32)) });
    assert!(schema("matte-request.schema.json").is_valid(&body));
    let (status, reply) = call(&app, post(body.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    let alpha = load_gray_bytes(&B64.decode(reply["alpha"].as_str().unwrap()).unwrap()).unwrap();
    for y in 0..h {
        for x in 0..w {
            let v = alpha.get(0, y, x);
            match x * 3 / w {
                0 => assert!(v < 1e-3, "({y},{x}) = {v}"),
                2 => assert!(v > 1.0 - 1e-3, "({y},{x}) = {v}"),
                _ => {}
            }
        }
    }
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let (img, h, w) = test_image();
    let image = B64.encode(&img);
    let app = app(small_config());
    let (s, _) = call(&app, post("{not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, post(json!({ "image": image, "bogus": 1 }).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, post(json!({ "image": "@@@" }).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let conflicting = json!({
        "image": image,
        "mask": B64.encode(gray_png(&vec![255; h * w], w as u32, h as u32)),
        "scribbles": { "strokes": [] }
    });
    assert!(!schema("matte-request.schema.json").is_valid(&conflicting));
    let (s, body) = call(&app, post(conflicting.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("exclusive"));

    let bad_trimap = json!({ "image": image, "trimap": B64.encode(gray_png(&vec![77; h * w], w as u32, h as u32)) });
    let (s, _) = call(&app, post(bad_trimap.to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let wrong_size = json!({ "image": image, "mask": B64.encode(gray_png(&[0; 4], 2, 2)) });
    let (s, _) = call(&app, post(wrong_size.to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn oversized_bodies_are_refused() {
    let mut cfg = small_config();
    cfg.service.max_body_bytes = 1024;
    let app = app(cfg);
    let body = json!({ "image": "A".repeat(4096) }).to_string();
    let (s, _) = call(&app, post(body)).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn scribbles_pin_their_pixels() {
    let app = app(small_config());
    let (img, _, _) = test_image();
    let body = json!({
        "image": B64.encode(&img),
        "scribbles": { "strokes": [
            { "label": 1, "radius": 3, "points": [[10, 10], [30, 12]] },
            { "label": 0, "radius": 2, "points": [[70, 50]] }
        ] }
    });
    assert!(schema("matte-request.schema.json").is_valid(&body));
    let (s, reply) = call(&app, post(body.to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let alpha = load_gray_bytes(&B64.decode(reply["alpha"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(alpha.get(0, 10, 20), 1.0);
    assert_eq!(alpha.get(0, 50, 70), 0.0);
}
