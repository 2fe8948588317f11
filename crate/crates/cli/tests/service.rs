use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use rellie_cli::service::{router, CreatedSession, Service, ServiceConfig, StateView};
use rellie_cli::session::{state_hash, Operation, Session};
use rellie_core::agent::{Agent, AgentConfig};
use rellie_core::checkpoint::save_checkpoint;
use rellie_core::image::ImageRGB;
use rellie_core::pipeline::{enhance, Decoding, EnhanceOptions, Refinement};
use rellie_core::reward::LossWeights;
use rellie_core::trainer::TrainConfig;
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "rellie-test-boundary";

fn agent() -> Agent {
    Agent::new(AgentConfig { layers: 3, width: 8, kernel: 3, seed: 5 }).unwrap()
}

/// Already on the 8-bit grid, so it survives the PNG upload unchanged.
fn dark_image() -> ImageRGB {
    let img = ImageRGB::from_fn(20, 24, |c, y, x| 0.04 + 0.05 * c as f32 + 0.02 * ((3 * x + y) % 9) as f32).unwrap();
    ImageRGB::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    svc: Arc<Service>,
}

fn fixture_with(edit: impl FnOnce(&mut ServiceConfig)) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&agent(), &TrainConfig::zero_shot(), dir.path().join("tiny.ckpt")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "not a checkpoint").unwrap();
    let mut cfg = ServiceConfig::new(dir.path());
    edit(&mut cfg);
    Fixture { svc: Service::new(cfg), dir }
}

fn fixture() -> Fixture {
    fixture_with(|_| {})
}

fn multipart(fields: &[(&str, &[u8])]) -> Body {
    let mut body = Vec::new();
    for (name, data) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(b"Content-Disposition: form-data; name=\"image\"; filename=\"in.png\"\r\nContent-Type: image/png\r\n\r\n");
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Body::from(body)
}

async fn send(svc: &Arc<Service>, method: Method, uri: &str, body: Body, content_type: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", content_type)
        .body(body)
        .unwrap();
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn post_json(svc: &Arc<Service>, uri: &str, body: Value) -> (StatusCode, Value) {
    send(svc, Method::POST, uri, Body::from(body.to_string()), "application/json").await
}

async fn create(svc: &Arc<Service>, img: &ImageRGB, seed: Option<&str>) -> CreatedSession {
    let png = img.to_png_bytes().unwrap();
    let mut fields: Vec<(&str, &[u8])> = vec![("image", &png), ("checkpoint", b"tiny")];
    if let Some(s) = seed {
        fields.push(("seed", s.as_bytes()));
    }
    let (status, v) = send(svc, Method::POST, "/sessions", multipart(&fields), &format!("multipart/form-data; boundary={BOUNDARY}")).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn step(svc: &Arc<Service>, id: &str, apply_rf: bool) -> StateView {
    let (status, v) = post_json(svc, &format!("/sessions/{id}/step"), json!({ "apply_rf": apply_rf })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn get_state(svc: &Arc<Service>, id: &str, k: usize) -> (StatusCode, Value) {
    send(svc, Method::GET, &format!("/sessions/{id}/state/{k}"), Body::empty(), "application/json").await
}

fn png(view: &StateView) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD.decode(&view.png_b64).unwrap()
}

fn assert_error(status: StatusCode, v: &Value, want_status: StatusCode, want_code: &str) {
    assert_eq!(status, want_status, "{v}");
    assert_eq!(v["code"], want_code, "{v}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()), "{v}");
}

#[tokio::test]
async fn create_returns_state_zero() {
    let f = fixture();
    let img = dark_image();
    let a = create(&f.svc, &img, None).await;
    assert_eq!(a.state.metadata.step, 0);
    assert_eq!(a.state.metadata.current_step, 0);
    assert_eq!(png(&a.state), img.to_png_bytes().unwrap());
    let b0 = a.state.breakdown;
    assert_eq!((b0.spa, b0.tva, b0.crl), (0.0, 0.0, 0.0));
    assert!((b0.total - 100.0 * b0.exp).abs() < 1e-12);
    let b = create(&f.svc, &img, None).await;
    assert_ne!(a.id, b.id);
    assert_eq!(f.svc.session_count(), 2);
}

#[tokio::test]
async fn bad_uploads_create_nothing() {
    let f = fixture();
    let ct = format!("multipart/form-data; boundary={BOUNDARY}");
    let (s, v) = send(&f.svc, Method::POST, "/sessions", multipart(&[("image", b"\x89PNG\r\n\x1a\ngarbage"), ("checkpoint", b"tiny")]), &ct).await;
    assert_error(s, &v, StatusCode::BAD_REQUEST, "bad_image");

    let png = dark_image().to_png_bytes().unwrap();
    let (s, v) = send(&f.svc, Method::POST, "/sessions", multipart(&[("image", &png), ("checkpoint", b"missing")]), &ct).await;
    assert_error(s, &v, StatusCode::NOT_FOUND, "unknown_checkpoint");
    let (s, v) = send(&f.svc, Method::POST, "/sessions", multipart(&[("image", &png), ("checkpoint", b"../tiny")]), &ct).await;
    assert_error(s, &v, StatusCode::NOT_FOUND, "unknown_checkpoint");
    let (s, v) = send(&f.svc, Method::POST, "/sessions", multipart(&[("image", &png)]), &ct).await;
    assert_error(s, &v, StatusCode::BAD_REQUEST, "bad_request");
    let (s, v) = send(&f.svc, Method::POST, "/sessions", multipart(&[("image", &png), ("checkpoint", b"tiny"), ("seed", b"-3")]), &ct).await;
    assert_error(s, &v, StatusCode::BAD_REQUEST, "bad_request");
    assert_eq!(f.svc.session_count(), 0);
}

#[tokio::test]
async fn steps_match_the_library_pipeline() {
    let f = fixture();
    let img = dark_image();
    let s = create(&f.svc, &img, None).await;
    let opts = EnhanceOptions { steps: 4, ..Default::default() };
    let expected = enhance(&agent(), &img, &opts).unwrap();
    for (t, want) in expected.iter().enumerate() {
        let view = step(&f.svc, &s.id, false).await;
        assert_eq!(view.metadata.step, t + 1);
        assert_eq!(view.metadata.hash, state_hash(&want.image));
        assert_eq!(png(&view), want.image.to_png_bytes().unwrap());
    }
}

#[tokio::test]
async fn refinement_is_identity_where_nothing_brightened() {
    // the curve fixes 0 and 1, so the state equals the input and the map is 1
    let f = fixture();
    let img = ImageRGB::from_fn(16, 16, |_, y, x| ((x / 4 + y / 4) % 2) as f32).unwrap();
    let plain = create(&f.svc, &img, None).await;
    let refined = create(&f.svc, &img, None).await;
    let a = step(&f.svc, &plain.id, false).await;
    let b = step(&f.svc, &refined.id, true).await;
    assert!(b.metadata.refined && !a.metadata.refined);
    assert_eq!(a.metadata.hash, b.metadata.hash);
}

#[tokio::test]
async fn refinement_changes_only_refined_steps() {
    let f = fixture();
    let img = dark_image();
    let plain = create(&f.svc, &img, None).await;
    let refined = create(&f.svc, &img, None).await;
    let a = step(&f.svc, &plain.id, false).await;
    let b = step(&f.svc, &refined.id, true).await;
    assert_ne!(a.metadata.hash, b.metadata.hash);
    let (_, v0) = get_state(&f.svc, &refined.id, 0).await;
    assert_eq!(v0["metadata"]["hash"], plain.state.metadata.hash);
}

#[tokio::test]
async fn rewind_then_step_repeats_states() {
    let f = fixture();
    let img = dark_image();
    let s = create(&f.svc, &img, None).await;
    let mut seen = Vec::new();
    for _ in 0..3 {
        seen.push(step(&f.svc, &s.id, false).await.metadata.hash);
    }
    let (st, v) = post_json(&f.svc, &format!("/sessions/{}/rewind", s.id), json!({ "to_step": 3 })).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["metadata"]["current_step"], 3);

    let (st, v) = post_json(&f.svc, &format!("/sessions/{}/rewind", s.id), json!({ "to_step": 1 })).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["metadata"]["hash"], seen[0]);
    assert_eq!(v["metadata"]["current_step"], 1);
    let (st, v) = get_state(&f.svc, &s.id, 2).await;
    assert_error(st, &v, StatusCode::UNPROCESSABLE_ENTITY, "out_of_range");

    for want in &seen[1..] {
        assert_eq!(&step(&f.svc, &s.id, false).await.metadata.hash, want);
    }

    let (st, v) = post_json(&f.svc, &format!("/sessions/{}/rewind", s.id), json!({ "to_step": 0 })).await;
    assert_eq!(st, StatusCode::OK);
    let view: StateView = serde_json::from_value(v).unwrap();
    assert_eq!(png(&view), img.to_png_bytes().unwrap());

    let (st, v) = post_json(&f.svc, &format!("/sessions/{}/rewind", s.id), json!({ "to_step": 1 })).await;
    assert_error(st, &v, StatusCode::UNPROCESSABLE_ENTITY, "out_of_range");
}

#[tokio::test]
async fn sampled_sessions_recompute_after_rewind() {
    let f = fixture();
    let img = dark_image();
    let s = create(&f.svc, &img, Some("17")).await;
    let first = step(&f.svc, &s.id, false).await.metadata.hash;
    let second = step(&f.svc, &s.id, false).await.metadata.hash;
    post_json(&f.svc, &format!("/sessions/{}/rewind", s.id), json!({ "to_step": 1 })).await;
    assert_eq!(step(&f.svc, &s.id, false).await.metadata.hash, second);

    let greedy = create(&f.svc, &img, None).await;
    assert_ne!(step(&f.svc, &greedy.id, false).await.metadata.hash, first);
}

#[tokio::test]
async fn reweight_changes_reports_not_pixels() {
    let f = fixture();
    let img = dark_image();
    let a = create(&f.svc, &img, None).await;
    let b = create(&f.svc, &img, None).await;
    let put = |id: String, body: Value| {
        let svc = f.svc.clone();
        async move { send(&svc, Method::PUT, &format!("/sessions/{id}/weights"), Body::from(body.to_string()), "application/json").await }
    };

    let (st, v) = put(b.id.clone(), json!({ "spa": 2.0, "exp": 200.0, "tva": 400.0, "crl": 40.0 })).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["weights"]["exp"], 200.0);
    let sa = step(&f.svc, &a.id, false).await;
    let sb = step(&f.svc, &b.id, false).await;
    assert_eq!(sa.metadata.hash, sb.metadata.hash);
    assert!((sb.breakdown.total - 2.0 * sa.breakdown.total).abs() <= 1e-9 * sa.breakdown.total.abs());
    assert_eq!(sb.metadata.weights.exp, 200.0);

    let (st, _) = put(b.id.clone(), json!({ "spa": 0.0, "exp": 0.0, "tva": 0.0, "crl": 0.0 })).await;
    assert_eq!(st, StatusCode::OK);
    let zb = step(&f.svc, &b.id, false).await;
    assert_eq!(zb.breakdown.total, 0.0);
    assert_eq!(zb.metadata.mean_reward, 0.0);
    assert_eq!(zb.metadata.hash, step(&f.svc, &a.id, false).await.metadata.hash);

    // earlier states keep what they reported
    let (_, v1) = get_state(&f.svc, &b.id, 1).await;
    assert_eq!(v1["breakdown"]["total"].as_f64().unwrap(), sb.breakdown.total);

    let (st, v) = put(b.id.clone(), json!({ "spa": -1.0, "exp": 0.0, "tva": 0.0, "crl": 0.0 })).await;
    assert_error(st, &v, StatusCode::UNPROCESSABLE_ENTITY, "invalid_weights");
}

#[tokio::test]
async fn unknown_sessions_and_routes() {
    let f = fixture();
    let (st, v) = get_state(&f.svc, "nope", 0).await;
    assert_error(st, &v, StatusCode::NOT_FOUND, "unknown_session");
    let (st, v) = post_json(&f.svc, "/sessions/nope/step", json!({})).await;
    assert_error(st, &v, StatusCode::NOT_FOUND, "unknown_session");
    let (st, v) = send(&f.svc, Method::GET, "/elsewhere", Body::empty(), "application/json").await;
    assert_error(st, &v, StatusCode::NOT_FOUND, "not_found");
}

#[tokio::test]
async fn lists_checkpoints() {
    let f = fixture();
    std::fs::write(f.dir.path().join("other.ckpt"), b"whatever").unwrap();
    let (st, v) = send(&f.svc, Method::GET, "/checkpoints", Body::empty(), "application/json").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!(["other", "tiny"]));
}

#[tokio::test]
async fn concurrent_steps_are_serialized() {
    let f = fixture();
    let img = dark_image();
    let s = create(&f.svc, &img, None).await;
    let tasks: Vec<_> = (0..5)
        .map(|_| {
            let (svc, id) = (f.svc.clone(), s.id.clone());
            tokio::spawn(async move { step(&svc, &id, false).await.metadata.step })
        })
        .collect();
    let mut steps = Vec::new();
    for t in tasks {
        steps.push(t.await.unwrap());
    }
    steps.sort();
    assert_eq!(steps, [1, 2, 3, 4, 5]);

    let expected = enhance(&agent(), &img, &EnhanceOptions { steps: 5, ..Default::default() }).unwrap();
    let (_, v) = get_state(&f.svc, &s.id, 5).await;
    assert_eq!(v["metadata"]["hash"], state_hash(&expected[4].image));
}

#[tokio::test]
async fn idle_sessions_expire() {
    let f = fixture_with(|c| c.idle_timeout = Duration::from_secs(60));
    let s = create(&f.svc, &dark_image(), None).await;
    assert_eq!(f.svc.sweep(Instant::now()), 0);
    assert_eq!(f.svc.sweep(Instant::now() + Duration::from_secs(61)), 1);
    let (st, v) = get_state(&f.svc, &s.id, 0).await;
    assert_error(st, &v, StatusCode::NOT_FOUND, "unknown_session");
}

#[tokio::test]
async fn spilled_sessions_match_and_clean_up() {
    let spill = tempfile::tempdir().unwrap();
    let root = spill.path().to_path_buf();
    let f = fixture_with(|c| c.spill_dir = Some(root.clone()));
    let img = dark_image();
    let s = create(&f.svc, &img, None).await;
    let expected = enhance(&agent(), &img, &EnhanceOptions { steps: 2, ..Default::default() }).unwrap();
    step(&f.svc, &s.id, false).await;
    step(&f.svc, &s.id, false).await;
    assert_eq!(std::fs::read_dir(root.join(&s.id)).unwrap().count(), 3);
    let (_, v) = get_state(&f.svc, &s.id, 2).await;
    assert_eq!(v["metadata"]["hash"], state_hash(&expected[1].image));
    post_json(&f.svc, &format!("/sessions/{}/rewind", s.id), json!({ "to_step": 1 })).await;
    assert_eq!(std::fs::read_dir(root.join(&s.id)).unwrap().count(), 2);

    f.svc.sweep(Instant::now() + Duration::from_secs(31 * 60));
    assert!(!root.join(&s.id).exists());
}

#[test]
fn replaying_operations_reproduces_every_state() {
    let agent = Arc::new(agent());
    let img = dark_image();
    let mut live = Session::new("tiny".into(), agent.clone(), img.clone(), Decoding::Sampled { seed: 3 }, Refinement::default(), None).unwrap();
    live.step(false).unwrap();
    live.step(true).unwrap();
    live.reweight(LossWeights { spa: 1.0, exp: 10.0, tva: 0.0, crl: 5.0 }).unwrap();
    live.step(false).unwrap();
    live.rewind(1).unwrap();
    live.step(true).unwrap();
    live.step(false).unwrap();
    assert!(live.rewind(7).is_err());

    let log = serde_json::to_string(live.operations()).unwrap();
    let ops: Vec<Operation> = serde_json::from_str(&log).unwrap();
    assert_eq!(ops.len(), 7);
    let replayed = Session::replay("tiny".into(), agent, img, live.decoding(), Refinement::default(), &ops).unwrap();
    assert_eq!(replayed.hashes(), live.hashes());
    for k in 0..=live.current() {
        assert_eq!(replayed.state(k).unwrap().1, live.state(k).unwrap().1);
    }
}
