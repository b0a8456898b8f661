//! HTTP service for the interactive console.
//!
//! | route | |
//! |---|---|
//! | `GET /api/layout` | the layout JSON |
//! | `GET /api/groups` | RF group labels and tie classes per mode |
//! | `POST /api/evaluate` | `{amplitudes, mode?, grid?, trace?}` → `{map, trace, metrics}` |
//! | `POST /api/optimize` | start a voltage search; returns a job id |
//! | `GET /api/jobs/:id` | job status and result |
//!
//! Every response carries `layout_hash`. Bad requests give 400, tracing
//! failures 422 and unknown jobs 404.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use junctionforge_core::field::{build_basis, BasisEvaluator, VoltageAssignment};
use junctionforge_core::layout::{symmetry_ties, Layout, TieMode};
use junctionforge_core::optimize::optimize_voltages_on;
use junctionforge_core::pseudo::{PathMode, TraceSettings};

use crate::config::{MapConfig, RunConfig, TraceConfig};
use crate::run::{evaluate_assignment, MetricsReport};

pub struct AppState {
    pub config: RunConfig,
    pub layout: Layout,
    pub basis: BasisEvaluator,
    pub layout_hash: String,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
}

#[derive(Debug, Clone)]
enum Job {
    Running,
    Done(Value),
    Failed(String),
}

impl AppState {
    pub fn new(config: RunConfig) -> anyhow::Result<Arc<Self>> {
        let layout = config.layout.build()?;
        let basis = build_basis(&layout)?;
        Ok(Arc::new(Self {
            layout_hash: layout.hash(),
            config,
            layout,
            basis,
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
        }))
    }

    fn reply(&self, status: StatusCode, mut body: Value) -> Response {
        body["layout_hash"] = json!(self.layout_hash);
        (status, Json(body)).into_response()
    }

    fn error(&self, status: StatusCode, msg: impl std::fmt::Display) -> Response {
        self.reply(status, json!({ "error": msg.to_string() }))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/layout", get(layout))
        .route("/api/groups", get(groups))
        .route("/api/evaluate", post(evaluate))
        .route("/api/optimize", post(optimize))
        .route("/api/jobs/:id", get(job))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn layout(State(s): State<Arc<AppState>>) -> Response {
    let layout: Value = serde_json::to_value(&s.layout).expect("layout serialises");
    s.reply(StatusCode::OK, json!({ "layout": layout }))
}

async fn groups(State(s): State<Arc<AppState>>) -> Response {
    let ties: BTreeMap<String, Vec<Vec<String>>> = [TieMode::Corner, TieMode::Linear, TieMode::Uniform]
        .into_iter()
        .map(|m| (m.to_string(), symmetry_ties(&s.layout, m).classes))
        .collect();
    s.reply(StatusCode::OK, json!({ "groups": s.layout.rf_groups(), "ties": ties }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateRequest {
    amplitudes: BTreeMap<String, f64>,
    mode: Option<PathMode>,
    grid: Option<MapConfig>,
    trace: Option<TraceConfig>,
}

fn parse<T: for<'de> Deserialize<'de>>(s: &AppState, body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| s.error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

async fn evaluate(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: EvaluateRequest = match parse(&s, &body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let groups = s.layout.rf_groups();
    if let Some(g) = req.amplitudes.keys().find(|g| !groups.contains(*g)) {
        return s.error(StatusCode::BAD_REQUEST, format!("unknown group {g:?}"));
    }
    let v = VoltageAssignment::new(req.amplitudes, s.config.drive());
    if let Err(e) = s.basis.weights(&v) {
        return s.error(StatusCode::BAD_REQUEST, e);
    }
    let mode = req.mode.unwrap_or(s.config.mode);
    let trace: TraceSettings = req.trace.as_ref().unwrap_or(&s.config.trace).into();
    let grid = req.grid.or_else(|| s.config.map.clone()).unwrap_or_default();
    let state = s.clone();
    let ev = tokio::task::spawn_blocking(move || {
        evaluate_assignment(&state.layout, &state.basis, &v, &state.config.ion(), mode, &trace, Some(&grid))
    })
    .await
    .expect("evaluation task panicked");
    let ev = match ev {
        Ok(ev) => ev,
        Err(e) => return s.error(StatusCode::BAD_REQUEST, format!("{e:#}")),
    };
    match ev.trace {
        Ok(trace) => s.reply(
            StatusCode::OK,
            json!({
                "assignment_hash": ev.assignment_hash,
                "mode": mode,
                "metrics": ev.metrics.as_ref().map(MetricsReport::from),
                "trace": trace,
                "map": ev.map,
            }),
        ),
        Err(e) => s.reply(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "assignment_hash": ev.assignment_hash, "mode": mode, "error": e.to_string() }),
        ),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OptimizeRequest {
    mode: Option<PathMode>,
    seed: Option<u64>,
    max_evals: Option<usize>,
    restarts: Option<usize>,
    lambda_mev_per_um: Option<f64>,
    initial: BTreeMap<String, f64>,
}

async fn optimize(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: OptimizeRequest = if body.is_empty() {
        OptimizeRequest::default()
    } else {
        match parse(&s, &body) {
            Ok(r) => r,
            Err(resp) => return resp,
        }
    };
    let mut config = s.config.clone();
    config.seed = req.seed.or(config.seed).or(Some(0));
    if let Some(m) = req.mode {
        config.mode = m;
    }
    let mut spec = match config.optimization_spec() {
        Ok(spec) => spec,
        Err(e) => return s.error(StatusCode::BAD_REQUEST, format!("{e:#}")),
    };
    if let Some(n) = req.max_evals {
        spec.search.max_evals = n;
    }
    if let Some(n) = req.restarts {
        spec.search.restarts = n;
    }
    if let Some(l) = req.lambda_mev_per_um {
        spec.lambda = l;
    }
    if !req.initial.is_empty() {
        spec.initial = req.initial;
    }
    let id = s.next_job.fetch_add(1, Ordering::Relaxed);
    s.jobs.lock().unwrap().insert(id, Job::Running);
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let job = match optimize_voltages_on(&state.layout, &state.basis, &spec) {
            Ok(r) => Job::Done(r.report_json()),
            Err(e) => Job::Failed(e.to_string()),
        };
        state.jobs.lock().unwrap().insert(id, job);
    });
    s.reply(StatusCode::ACCEPTED, json!({ "job_id": id, "status": "running" }))
}

async fn job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some((id, job)) = id
        .parse::<u64>()
        .ok()
        .and_then(|n| s.jobs.lock().unwrap().get(&n).cloned().map(|j| (n, j)))
    else {
        return s.error(StatusCode::NOT_FOUND, format!("no job {id:?}"));
    };
    let body = match job {
        Job::Running => json!({ "job_id": id, "status": "running" }),
        Job::Done(r) => json!({ "job_id": id, "status": "done", "result": r }),
        Job::Failed(e) => json!({ "job_id": id, "status": "failed", "error": e }),
    };
    s.reply(StatusCode::OK, body)
}
