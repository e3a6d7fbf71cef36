use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use tsuggest::decoder_search::BeamConfig;
use tsuggest::model::{ModelConfig, SaTransformer};
use tsuggest::subword::{learn_bpe, BpeOptions};
use tsuggest::suggest::Suggester;
use tsuggest_cli::server::{router, AppState, ErrorBody, SuggestResponse};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn tiny_suggester() -> Suggester {
    let corpus = vec![words("a b c d"), words("x y z"), words("a x b y")];
    let sw = learn_bpe(&corpus, BpeOptions { num_merges: 10, min_frequency: 1 }).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 16,
        vocab_size: sw.vocab().len(),
        ..ModelConfig::default()
    };
    let model = SaTransformer::new(cfg, 3).unwrap();
    Suggester::new(model, sw, "tiny".into(), BeamConfig { beam_size: 4, max_len: 6, alpha: 0.6 }).unwrap()
}

fn app(with_model: bool) -> axum::Router {
    let s = with_model.then(tiny_suggester);
    router(AppState::new(s, 2, Duration::from_secs(10)), None)
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn post(json: serde_json::Value) -> Request<Body> {
    Request::post("/suggest")
        .header("content-type", "application/json")
        .body(Body::from(json.to_string()))
        .unwrap()
}

fn query(span: [usize; 2]) -> serde_json::Value {
    serde_json::json!({"source": "a b c", "translation": "x y z", "span": span})
}

#[tokio::test]
async fn health_reports_model_state() {
    let (st, body) = call(app(true), Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_id"], "tiny");

    let (_, body) = call(app(false), Request::get("/health").body(Body::empty()).unwrap()).await;
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "no_model");
}

#[tokio::test]
async fn suggest_without_model_is_unavailable() {
    let (st, body) = call(app(false), post(query([0, 1]))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error, "model_not_loaded");
}

#[tokio::test]
async fn reversed_or_overlong_span_is_rejected() {
    for span in [[3, 1], [2, 4]] {
        let (st, body) = call(app(true), post(query(span))).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{span:?}");
        let e: ErrorBody = serde_json::from_slice(&body).unwrap();
        assert_eq!(e.error, "invalid_span");
    }
}

#[tokio::test]
async fn malformed_body_and_bad_k_are_rejected() {
    let req = Request::post("/suggest").body(Body::from("{not json")).unwrap();
    let (st, body) = call(app(true), req).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "invalid_request");

    let mut q = query([0, 1]);
    q["k"] = 9.into();
    let (st, body) = call(app(true), post(q)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "invalid_k");
}

#[tokio::test]
async fn null_span_and_hint_are_accepted() {
    let (st, body) = call(app(true), post(query([1, 1]))).await;
    assert_eq!(st, StatusCode::OK);
    let r: SuggestResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.model_id, "tiny");
    assert!(!r.suggestions.is_empty() && r.suggestions.len() <= 3);

    let mut q = query([0, 2]);
    q["hint"] = "x y".into();
    q["k"] = 2.into();
    let (st, body) = call(app(true), post(q)).await;
    assert_eq!(st, StatusCode::OK);
    let r: SuggestResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.suggestions.len() <= 2);
}

#[tokio::test]
async fn identical_requests_give_identical_suggestions() {
    let app = app(true);
    let (_, a) = call(app.clone(), post(query([0, 2]))).await;
    let (_, b) = call(app, post(query([0, 2]))).await;
    let a: SuggestResponse = serde_json::from_slice(&a).unwrap();
    let b: SuggestResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(a.suggestions, b.suggestions);
    assert_eq!(a.model_id, b.model_id);
    let scores: Vec<f64> = a.suggestions.iter().map(|s| s.score).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[tokio::test]
async fn static_ui_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>ui</p>").unwrap();
    let app = router(AppState::new(None, 1, Duration::from_secs(1)), Some(dir.path().to_path_buf()));
    let (st, body) = call(app, Request::get("/ui/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, b"<p>ui</p>");
}
