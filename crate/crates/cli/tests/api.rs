use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use junctionforge::api::{router, AppState};
use junctionforge::config::{RunConfig, VoltageConfig};
use junctionforge::run::cmd_evaluate;

fn app() -> (Arc<AppState>, Router) {
    let mut config = RunConfig::default();
    config.trace.step_um = 4.0;
    let state = AppState::new(config).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn uniform(state: &AppState, v: f64) -> BTreeMap<String, f64> {
    state.layout.rf_groups().into_iter().map(|g| (g, v)).collect()
}

#[tokio::test]
async fn layout_and_groups_carry_the_layout_hash() {
    let (state, app) = app();
    let (status, body) = call(&app, "GET", "/api/layout", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["layout_hash"], state.layout_hash);
    assert_eq!(body["layout"]["electrodes"].as_array().unwrap().len(), 36);

    let (status, body) = call(&app, "GET", "/api/groups", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["layout_hash"], state.layout_hash);
    let groups = body["groups"].as_array().unwrap().len();
    for mode in ["corner", "linear", "uniform"] {
        let classes = body["ties"][mode].as_array().unwrap();
        let members: usize = classes.iter().map(|c| c.as_array().unwrap().len()).sum();
        assert_eq!(members, groups, "{mode}");
    }
    assert_eq!(body["ties"]["uniform"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn evaluate_matches_the_cli() {
    let (state, app) = app();
    let req = json!({ "amplitudes": uniform(&state, 100.0), "mode": "corner" });
    let (status, body) = call(&app, "POST", "/api/evaluate", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["layout_hash"], state.layout_hash);

    let tmp = tempfile::TempDir::new().unwrap();
    let mut config = state.config.clone();
    config.out_dir = tmp.path().to_path_buf();
    config.voltages = Some(VoltageConfig {
        uniform_v: Some(100.0),
        amplitudes_v: BTreeMap::new(),
    });
    let cli = cmd_evaluate(&config).unwrap();
    let (a, b) = (
        body["metrics"]["barrier_meV"].as_f64().unwrap(),
        cli["metrics"]["barrier_meV"].as_f64().unwrap(),
    );
    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    assert_eq!(body["metrics"], cli["metrics"]);
    assert_eq!(body["assignment_hash"], cli["assignment_hash"]);

    let samples = body["trace"]["samples"].as_array().unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    assert_eq!(samples.len(), csv.lines().count() - 1);
    let map = &body["map"];
    assert_eq!(
        map["psi"].as_array().unwrap().len() as u64,
        map["a"]["n"].as_u64().unwrap() * map["b"]["n"].as_u64().unwrap()
    );
}

#[tokio::test]
async fn custom_grid_is_honoured() {
    let (state, app) = app();
    let req = json!({
        "amplitudes": uniform(&state, 100.0),
        "grid": { "plane": { "plane": "yz", "x": 0.0 }, "a_um": [-50, 50], "b_um": [20, 120], "step_a_um": 5, "step_b_um": 5 },
    });
    let (status, body) = call(&app, "POST", "/api/evaluate", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["map"]["a"]["n"], 21);
    assert_eq!(body["map"]["b"]["n"], 21);
}

#[tokio::test]
async fn missing_group_is_a_bad_request() {
    let (state, app) = app();
    let mut amps = uniform(&state, 100.0);
    amps.remove("RF2A");
    let (status, body) = call(
        &app,
        "POST",
        "/api/evaluate",
        Some(json!({ "amplitudes": amps }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("RF2A"));
    assert_eq!(body["layout_hash"], state.layout_hash);
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let (state, app) = app();
    for body in [
        "{not json".to_string(),
        json!({ "amps": {} }).to_string(),
        json!({ "amplitudes": { "RF1A": "high" } }).to_string(),
        json!({ "amplitudes": uniform(&state, 100.0), "mode": "sideways" }).to_string(),
    ] {
        let (status, resp) = call(&app, "POST", "/api/evaluate", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(resp["error"].as_str().unwrap().starts_with("malformed"), "{resp}");
        assert_eq!(resp["layout_hash"], state.layout_hash);
    }
    let mut amps = uniform(&state, 100.0);
    amps.insert("RF9Z".into(), 1.0);
    let (status, _) = call(&app, "POST", "/api/evaluate", Some(json!({ "amplitudes": amps }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        "POST",
        "/api/evaluate",
        Some(json!({ "amplitudes": uniform(&state, -5.0) }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn zero_voltages_are_unprocessable() {
    let (state, app) = app();
    let req = json!({ "amplitudes": uniform(&state, 0.0) });
    let (status, body) = call(&app, "POST", "/api/evaluate", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("no confining field"));
    assert_eq!(body["layout_hash"], state.layout_hash);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_evaluations_are_independent() {
    let (state, app) = app();
    let a = json!({ "amplitudes": uniform(&state, 100.0), "mode": "linear" }).to_string();
    let b = json!({ "amplitudes": uniform(&state, 200.0), "mode": "linear" }).to_string();
    let (ra, rb) = tokio::join!(
        call(&app, "POST", "/api/evaluate", Some(a)),
        call(&app, "POST", "/api/evaluate", Some(b))
    );
    assert_eq!(ra.0, StatusCode::OK);
    assert_eq!(rb.0, StatusCode::OK);
    let (ba, bb) = (
        ra.1["metrics"]["barrier_meV"].as_f64().unwrap(),
        rb.1["metrics"]["barrier_meV"].as_f64().unwrap(),
    );
    // Ψ scales with the square of the amplitude.
    assert!((bb / ba - 4.0).abs() < 1e-9, "{ba} {bb}");
    assert_ne!(ra.1["assignment_hash"], rb.1["assignment_hash"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn optimisation_jobs_are_polled() {
    let (state, app) = app();
    let req = json!({ "mode": "linear", "seed": 5, "max_evals": 20, "restarts": 0 });
    let (status, body) = call(&app, "POST", "/api/optimize", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body["layout_hash"], state.layout_hash);
    let id = body["job_id"].as_u64().unwrap();
    let uri = format!("/api/jobs/{id}");
    let result = loop {
        let (status, body) = call(&app, "GET", &uri, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["layout_hash"], state.layout_hash);
        match body["status"].as_str().unwrap() {
            "running" => tokio::time::sleep(Duration::from_millis(100)).await,
            "done" => break body["result"].clone(),
            other => panic!("job ended {other}: {body}"),
        }
    };
    assert_eq!(result["seed"], 5);
    assert_eq!(result["evaluations"], 20);
    assert!(result["objective_meV"].as_f64().unwrap().is_finite());

    let (status, body) = call(&app, "GET", "/api/jobs/999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["layout_hash"], state.layout_hash);
    let (status, _) = call(&app, "GET", "/api/jobs/abc", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/api/optimize", Some("[1,2".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
