use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use headlift::core::dataset::SceneKind;
use headlift::core::edit_encoder::{class, SegmentationMap};
use headlift::core::fixtures::{fixture_scene, FixtureConfig};
use headlift::core::image::Image;
use headlift::core::model::{Model, ModelConfig};
use headlift::formats;
use headlift::service::{router, AppState, Engine};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(name);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&s).unwrap()
}

fn assert_valid(name: &str, v: &Value) {
    let errors: Vec<String> = schema(name).iter_errors(v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{v}");
}

fn loaded(capacity: usize) -> Arc<AppState> {
    let state = AppState::new(capacity);
    state.install(Engine::new(
        Model::new(&ModelConfig::tiny()).unwrap(),
        "test".into(),
    ));
    state
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn post(state: &Arc<AppState>, path: &str, body: &Value) -> (StatusCode, Value) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(state, req).await
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    call(state, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn head_request() -> Value {
    let cfg = FixtureConfig {
        size: 32,
        gaussians: 800,
        ..Default::default()
    };
    let scene = fixture_scene("svc", SceneKind::Singleview, 4, &cfg).unwrap();
    let v = &scene.views[0];
    json!({
        "image": B64.encode(formats::encode_png(&v.image).unwrap()),
        "mask": B64.encode(formats::encode_mask(&v.mask).unwrap()),
    })
}

fn seg_b64(size: usize) -> String {
    let mut seg = SegmentationMap::filled(size, class::BACKGROUND);
    for y in size / 4..size * 3 / 4 {
        for x in size / 4..size * 3 / 4 {
            seg.classes[y * size + x] = if y < size / 2 {
                class::HAIR
            } else {
                class::SKIN
            };
        }
    }
    B64.encode(formats::encode_seg_png(&seg).unwrap())
}

async fn reconstruct(state: &Arc<AppState>) -> String {
    let body = head_request();
    assert_valid("reconstruct.request.json", &body);
    let (status, v) = post(state, "/reconstruct", &body).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_valid("session.response.json", &v);
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn unloaded_model_answers_503() {
    let state = AppState::new(4);
    let (status, v) = get(&state, "/health").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_valid("health.response.json", &v);
    let (status, v) = post(&state, "/reconstruct", &head_request()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_valid("error.response.json", &v);
    let (status, _) = get(&state, "/render?session_id=x").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn health_reports_the_checkpoint() {
    let (status, v) = get(&loaded(4), "/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_valid("health.response.json", &v);
    assert_eq!(v["checkpoint_id"], "test");
}

#[tokio::test]
async fn segment_returns_a_flagged_class_map() {
    let state = loaded(4);
    let body = json!({ "image": head_request()["image"] });
    assert_valid("segment.request.json", &body);
    let (status, v) = post(&state, "/segment", &body).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_valid("segment.response.json", &v);
    assert_eq!(v["stub"], true);
    let seg =
        formats::decode_seg_png(&B64.decode(v["seg_map"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(seg.size, 32);
    assert!(seg.classes.contains(&class::SKIN) && seg.classes.contains(&class::HAIR));
}

#[tokio::test]
async fn renders_are_bit_identical_and_schema_valid() {
    let state = loaded(4);
    let id = reconstruct(&state).await;
    let uri = format!("/render?session_id={id}&yaw=30&pitch=-5&distance=2.7&size=24");
    let (s1, a) = get(&state, &uri).await;
    let (s2, b) = get(&state, &uri).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_valid("render.response.json", &a);
    assert_eq!(a, b);
    let (img, _) =
        formats::decode_image(&B64.decode(a["image"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (24, 24));
}

#[tokio::test]
async fn edit_then_render_is_deterministic() {
    let state = loaded(4);
    let size = 32;
    let text =
        json!({ "seg_map": seg_b64(size), "style": { "type": "text", "value": "short red hair" } });
    assert_valid("edit.request.json", &text);
    let (s, v) = post(&state, "/edit", &text).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_valid("session.response.json", &v);
    let first = v["session_id"].as_str().unwrap().to_string();
    let (_, v) = post(&state, "/edit", &text).await;
    let second = v["session_id"].as_str().unwrap().to_string();
    assert_ne!(first, second);
    let (_, a) = get(&state, &format!("/render?session_id={first}&yaw=0")).await;
    let (_, b) = get(&state, &format!("/render?session_id={first}&yaw=0")).await;
    let (_, c) = get(&state, &format!("/render?session_id={second}&yaw=0")).await;
    assert_eq!(a["image"], b["image"]);
    assert_eq!(a["image"], c["image"]);

    let style_img = Image::filled(20, 20, &[0.8, 0.2, 0.2]);
    let image = json!({
        "seg_map": seg_b64(size),
        "style": { "type": "image", "value": B64.encode(formats::encode_png(&style_img).unwrap()) },
    });
    assert_valid("edit.request.json", &image);
    let (s, v) = post(&state, "/edit", &image).await;
    assert_eq!(s, StatusCode::OK, "{v}");
}

#[tokio::test]
async fn malformed_requests_name_the_field() {
    let state = loaded(4);
    let cases = [
        ("/reconstruct", json!({}), "image"),
        ("/reconstruct", json!({ "image": "%%%" }), "image"),
        (
            "/reconstruct",
            json!({ "image": head_request()["image"], "mask": 5 }),
            "mask",
        ),
        ("/segment", json!({ "image": 3 }), "image"),
        (
            "/edit",
            json!({ "style": { "type": "text", "value": "x" } }),
            "seg_map",
        ),
        (
            "/edit",
            json!({ "seg_map": seg_b64(8), "style": { "type": "text", "value": "x" } }),
            "seg_map",
        ),
        ("/edit", json!({ "seg_map": seg_b64(32) }), "style"),
        (
            "/edit",
            json!({ "seg_map": seg_b64(32), "style": { "type": "audio", "value": "x" } }),
            "style.type",
        ),
        (
            "/edit",
            json!({ "seg_map": seg_b64(32), "style": { "type": "text" } }),
            "style.value",
        ),
    ];
    for (path, body, field) in cases {
        let (s, v) = post(&state, path, &body).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{path} {body}");
        assert_valid("error.response.json", &v);
        assert_eq!(v["field"], field, "{path} {body}");
    }
    let req = Request::post("/reconstruct")
        .body(Body::from("{not json"))
        .unwrap();
    let (s, v) = call(&state, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "body");

    let id = reconstruct(&state).await;
    for (q, field) in [
        ("yaw=abc", "yaw"),
        ("pitch=95", "pitch"),
        ("distance=0", "distance"),
        ("size=0", "size"),
        ("size=5000", "size"),
    ] {
        let (s, v) = get(&state, &format!("/render?session_id={id}&{q}")).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
        assert_eq!(v["field"], field);
    }
    let (s, v) = get(&state, "/render?yaw=0").await;
    assert_eq!(
        (s, v["field"].as_str()),
        (StatusCode::BAD_REQUEST, Some("session_id"))
    );
}

#[tokio::test]
async fn empty_foreground_is_unprocessable() {
    let state = loaded(4);
    let green = Image::filled(32, 32, &[0.0, 1.0, 0.0]);
    let (s, v) = post(
        &state,
        "/reconstruct",
        &json!({ "image": B64.encode(formats::encode_png(&green).unwrap()) }),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_valid("error.response.json", &v);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let (s, v) = get(&loaded(4), "/render?session_id=nope&yaw=0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_valid("error.response.json", &v);
}

#[tokio::test]
async fn lru_evicts_the_least_recently_rendered_session() {
    let state = loaded(2);
    let a = reconstruct(&state).await;
    let b = reconstruct(&state).await;
    assert_eq!(
        get(&state, &format!("/render?session_id={a}")).await.0,
        StatusCode::OK
    );
    let c = reconstruct(&state).await;
    assert_eq!(state.sessions.lock().unwrap().len(), 2);
    assert_eq!(
        get(&state, &format!("/render?session_id={b}")).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&state, &format!("/render?session_id={a}")).await.0,
        StatusCode::OK
    );
    assert_eq!(
        get(&state, &format!("/render?session_id={c}")).await.0,
        StatusCode::OK
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_renders_agree() {
    let state = loaded(8);
    let id = reconstruct(&state).await;
    let uri = format!("/render?session_id={id}&yaw=45");
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let (state, uri) = (state.clone(), uri.clone());
            tokio::spawn(async move { get(&state, &uri).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        images.push(v["image"].clone());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}
