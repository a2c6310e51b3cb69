//! HTTP contract of the inference service against a briefly trained
//! stylization model.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dynanet::config::{RunConfig, TaskKind};
use dynanet::data::to_rgb_bytes;
use dynanet::dynet::AlphaVector;
use dynanet::pipeline::Setup;
use dynanet::sweep::{evaluate_point, format_g9, sweep_uniform, to_csv};
use dynanet_server::{router, sweep_alphas, InferResponse, ModelInfo, SessionState, SweepPoint};

fn session() -> Arc<SessionState> {
    static STATE: OnceLock<Arc<SessionState>> = OnceLock::new();
    STATE
        .get_or_init(|| {
            let cfg = RunConfig {
                train_images: 4,
                val_images: 3,
                main_steps: 6,
                tuning_steps: 6,
                ..RunConfig::preset(TaskKind::Stylize)
            };
            let setup = Setup::generate(&cfg).unwrap();
            let (mut net, _) = setup.train_main().unwrap();
            setup.train_tuning(&mut net).unwrap();
            Arc::new(SessionState::new(net, setup).unwrap())
        })
        .clone()
}

async fn call(req: Request<Body>) -> (StatusCode, Value, axum::http::HeaderMap) {
    let resp = router(session()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, body, headers)
}

async fn get(uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = call(Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, b)
}

async fn infer(body: Value) -> (StatusCode, Value) {
    infer_raw(body.to_string()).await
}

async fn infer_raw(body: String) -> (StatusCode, Value) {
    let req = Request::post("/api/infer").header(header::CONTENT_TYPE, "application/json").body(Body::from(body)).unwrap();
    let (s, b, _) = call(req).await;
    (s, b)
}

#[tokio::test]
async fn model_descriptor_lists_blocks_and_images() {
    let (status, body) = get("/api/model").await;
    assert_eq!(status, StatusCode::OK);
    let info: ModelInfo = serde_json::from_value(body.clone()).unwrap();
    assert_eq!(info.blocks, 3);
    assert_eq!(info.image_size, 64);
    assert_eq!(info.image_ids, vec!["val_000", "val_001", "val_002"]);
    assert_eq!(info.task, "stylize");
    assert_eq!(info.objective0.len(), 2);
    assert_eq!(info.objective1[1].weight, 100.0);
    assert_eq!(get("/api/model").await.1, body);
}

#[tokio::test]
async fn zero_alpha_returns_quantized_main_output() {
    let state = session();
    let (status, body) = infer(json!({"image_id": "val_001", "alpha": [0, 0, 0]})).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InferResponse = serde_json::from_value(body).unwrap();
    assert_eq!((resp.width, resp.height), (64, 64));
    let bytes = BASE64.decode(&resp.rgb_base64).unwrap();
    assert_eq!(bytes.len(), 64 * 64 * 3);
    let main = state.net().forward_main(&state.setup().validation[1].image).unwrap();
    assert_eq!(bytes, to_rgb_bytes(&main).unwrap());
}

#[tokio::test]
async fn unit_alpha_losses_equal_the_sweep_record() {
    let state = session();
    let (_, body) = infer(json!({"image_id": "val_002", "alpha": [1, 1, 1]})).await;
    let resp: InferResponse = serde_json::from_value(body).unwrap();
    let setup = state.setup();
    let rec = evaluate_point(state.net(), &setup.validation[2], &AlphaVector::uniform(3, 1.0), &setup.probe, &setup.context())
        .unwrap();
    assert_eq!(resp.content_loss, rec.content_loss);
    assert_eq!(resp.style_loss, rec.style_loss);
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let req = json!({"image_id": "val_000", "alpha": [0.3, -0.7, 1.9]});
    let (a, b) = tokio::join!(infer(req.clone()), infer(req.clone()));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1, b.1);
    assert_eq!(infer(req).await.1, a.1);
}

#[tokio::test]
async fn infer_rejects_bad_requests() {
    let cases = [
        (json!({"image_id": "nope", "alpha": [0, 0, 0]}), StatusCode::NOT_FOUND),
        (json!({"image_id": "val_000", "alpha": [0, 0]}), StatusCode::BAD_REQUEST),
        (json!({"image_id": "val_000", "alpha": [0, 4.5, 0]}), StatusCode::BAD_REQUEST),
        (json!({"image_id": "val_000", "alpha": [0, -4.01, 0]}), StatusCode::BAD_REQUEST),
        (json!({"image_id": "val_000"}), StatusCode::BAD_REQUEST),
        (json!({"image_id": "val_000", "alpha": ["x", 0, 0]}), StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        let (status, resp) = infer(body.clone()).await;
        assert_eq!(status, want, "{body}");
        assert!(resp["error"].is_string(), "{resp}");
    }
    assert_eq!(infer_raw("{not json".into()).await.0, StatusCode::BAD_REQUEST);
    let (status, _) = infer(json!({"image_id": "val_000", "alpha": [4, -4, 4]})).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn two_step_sweep_hits_both_ends() {
    let (status, body) = get("/api/sweep?image_id=val_000&steps=2&lo=0&hi=1").await;
    assert_eq!(status, StatusCode::OK);
    let points: Vec<SweepPoint> = serde_json::from_value(body).unwrap();
    assert_eq!(points.iter().map(|p| p.alpha).collect::<Vec<_>>(), vec![0.0, 1.0]);
    let (_, one) = infer(json!({"image_id": "val_000", "alpha": [1, 1, 1]})).await;
    assert_eq!(points[1].content_loss, one["content_loss"].as_f64().unwrap());
    assert_eq!(points[1].style_loss, one["style_loss"].as_f64().unwrap());
}

#[tokio::test]
async fn sweep_matches_the_sweep_module_csv() {
    let state = session();
    let (status, body) = get("/api/sweep?image_id=val_001&steps=13").await;
    assert_eq!(status, StatusCode::OK);
    let points: Vec<SweepPoint> = serde_json::from_value(body).unwrap();
    assert_eq!(points.len(), 13);
    assert_eq!((points[0].alpha, points[12].alpha), (-1.0, 2.0));

    let setup = state.setup();
    let alphas = sweep_alphas(-1.0, 2.0, 13);
    let records =
        sweep_uniform(state.net(), &setup.validation[1..2], &alphas, &setup.probe, &setup.context(), 1).unwrap();
    let csv = to_csv(&records).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), points.len());
    for (p, row) in points.iter().zip(&rows) {
        assert_eq!(format_g9(p.alpha), row[0]);
        assert_eq!(format_g9(p.content_loss), row[3]);
        assert_eq!(format_g9(p.style_loss), row[4]);
        assert_eq!(&row[6], "val_001");
    }
}

#[tokio::test]
async fn sweep_rejects_bad_queries() {
    for (uri, want) in [
        ("/api/sweep?image_id=val_000&steps=1", StatusCode::BAD_REQUEST),
        ("/api/sweep?image_id=val_000&steps=102", StatusCode::BAD_REQUEST),
        ("/api/sweep?image_id=val_000&steps=abc", StatusCode::BAD_REQUEST),
        ("/api/sweep?image_id=val_000&lo=1&hi=0", StatusCode::BAD_REQUEST),
        ("/api/sweep?image_id=val_000&lo=-5", StatusCode::BAD_REQUEST),
        ("/api/sweep?steps=5", StatusCode::BAD_REQUEST),
        ("/api/sweep?image_id=missing&steps=5", StatusCode::NOT_FOUND),
    ] {
        let (status, body) = get(uri).await;
        assert_eq!(status, want, "{uri}");
        assert!(body["error"].is_string(), "{uri}: {body}");
    }
    let (status, body) = get("/api/sweep?image_id=val_000&steps=101").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 101);
}

#[tokio::test]
async fn unknown_routes_are_json_404() {
    let (status, body) = get("/api/nothing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn cors_allows_any_origin() {
    let req = Request::get("/api/model").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let (_, _, headers) = call(req).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let preflight = Request::options("/api/infer")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (status, _, headers) = call(preflight).await;
    assert!(status.is_success());
    assert!(headers.contains_key(header::ACCESS_CONTROL_ALLOW_METHODS));
}

#[test]
fn single_inference_is_fast_at_64px() {
    let state = session();
    let req = dynanet_server::InferRequest { image_id: "val_000".into(), alpha: vec![0.5; 3] };
    state.infer(&req).unwrap();
    let mut times: Vec<Duration> = (0..5)
        .map(|_| {
            let t = Instant::now();
            state.infer(&req).unwrap();
            t.elapsed()
        })
        .collect();
    times.sort();
    assert!(times[2] < Duration::from_millis(200), "median {:?}", times[2]);
}

#[test]
fn serves_over_tcp() {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    let state = session();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(dynanet_server::serve(state, "127.0.0.1:0".parse().unwrap(), move |a| tx.send(a).unwrap())).unwrap();
    });
    let addr = rx.recv_timeout(Duration::from_secs(60)).unwrap();
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    write!(stream, "GET /api/model HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = &response[response.find("\r\n\r\n").unwrap() + 4..];
    let info: ModelInfo = serde_json::from_str(body).unwrap();
    assert_eq!(info.blocks, 3);
}
