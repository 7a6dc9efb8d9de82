use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ddcs_core::harness::{
    self, check_vo, export_balances, prove, verify_grid_against_state, ProofQuery, RunReport, Scenario, StateBundle,
    Step, WorldConfig,
};
use ddcs_core::integrity_manager::{GridVerdict, MerkleHashGrid};
use ddcs_core::signature::KeyDirectory;

use crate::api::*;
use crate::sessions::{Session, Sessions};
use crate::ApiError;

/// State bundles of long runs are large; the default 2 MiB is too small.
const BODY_LIMIT: usize = 64 << 20;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<Sessions>>,
}

impl AppState {
    fn sessions(&self) -> Result<MutexGuard<'_, Sessions>, ApiError> {
        self.sessions.lock().map_err(|_| ApiError::Internal("session table poisoned".into()))
    }

    fn session(&self, id: u64) -> Result<Session, ApiError> {
        self.sessions()?.get(id)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/run", post(run))
        .route("/v1/grid/verify", post(verify_grid))
        .route("/v1/balances/export", post(export))
        .route("/v1/prove", post(prove_vo))
        .route("/v1/check", post(check))
        .route("/v1/sessions", post(open_session))
        .route("/v1/sessions/{id}", get(session_report).delete(close_session))
        .route("/v1/sessions/{id}/steps", post(apply_steps))
        .route("/v1/sessions/{id}/state", get(session_state))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Engine calls are CPU bound and synchronous.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn lock(s: &Session) -> Result<MutexGuard<'_, harness::Runner>, ApiError> {
    s.lock().map_err(|_| ApiError::Internal("session poisoned".into()))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn run(Json(req): Json<RunRequest>) -> Result<Json<RunResponse>, ApiError> {
    blocking(move || {
        let mut sc = Scenario::parse(&req.scenario)?;
        if let Some(seed) = req.seed {
            sc.config.seed = seed;
        }
        let (world, report) = harness::run(&sc)?;
        let state = if req.include_state {
            Some(StateBundle::from_world(&world)?)
        } else {
            None
        };
        let passed = report.passed();
        tracing::info!(seed = sc.config.seed, steps = sc.steps.len(), passed, "scenario run");
        Ok(Json(RunResponse { passed, report, state }))
    })
    .await
}

async fn verify_grid(Json(req): Json<GridRequest>) -> Result<Json<GridResponse>, ApiError> {
    blocking(move || {
        let grid = req
            .grid
            .map(|t| t.parse::<MerkleHashGrid>())
            .transpose()
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let resp = match verify_grid_against_state(&req.state, grid.as_ref())? {
            GridVerdict::Matches => GridResponse {
                matches: true,
                rows: vec![],
                columns: vec![],
                cells: vec![],
            },
            GridVerdict::Mismatch { rows, columns, cells } => GridResponse {
                matches: false,
                rows,
                columns,
                cells,
            },
        };
        Ok(Json(resp))
    })
    .await
}

async fn export(Json(req): Json<ExportRequest>) -> Result<Json<ExportResponse>, ApiError> {
    blocking(move || Ok(Json(ExportResponse { tsv: export_balances(&req.state)? }))).await
}

async fn prove_vo(Json(req): Json<ProveRequest>) -> Result<Json<ProveResponse>, ApiError> {
    blocking(move || {
        let subject = match (req.subject, req.query) {
            (Some(s), _) => s,
            (None, ProofQuery::Pair { pair, .. }) => {
                if pair.lo().is_treasury() {
                    pair.hi()
                } else {
                    pair.lo()
                }
            }
            (None, ProofQuery::Balances { .. }) => {
                return Err(ApiError::BadRequest("a balance proof needs a subject".into()));
            }
        };
        let vo = prove(&req.state, subject, req.query)?;
        Ok(Json(ProveResponse {
            vo: B64.encode(vo.to_bytes()),
        }))
    })
    .await
}

async fn check(Json(req): Json<CheckRequest>) -> Result<Json<CheckResponse>, ApiError> {
    blocking(move || {
        let bytes = B64
            .decode(req.vo.trim())
            .map_err(|e| ApiError::BadRequest(format!("vo is not base64: {e}")))?;
        let keys: KeyDirectory = req
            .keys
            .parse()
            .map_err(|e| ApiError::BadRequest(format!("keys: {e}")))?;
        let verdict = check_vo(&bytes, &keys, req.state.as_ref())?;
        Ok(Json(CheckResponse {
            verdict,
            ok: verdict.all(),
        }))
    })
    .await
}

async fn open_session(
    State(app): State<AppState>,
    body: Option<Json<SessionRequest>>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let config = body.map(|Json(b)| b.config).unwrap_or_default();
    let id = app.sessions()?.open(config)?;
    tracing::info!(id, "session opened");
    Ok((StatusCode::CREATED, Json(SessionCreated { id })))
}

async fn close_session(State(app): State<AppState>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    app.sessions()?.close(id)?;
    Ok(StatusCode::NO_CONTENT)
}

/// Scenario text may carry a leading `policy` line, which the parser folds
/// into the config; it is turned back into a step. Other config lines are
/// refused because the world already exists.
fn session_steps(req: StepsRequest) -> Result<Vec<Step>, ApiError> {
    let mut steps = Vec::new();
    if let Some(text) = req.text {
        let sc = Scenario::parse(&text)?;
        let default = WorldConfig::default();
        let mut rest = sc.config;
        rest.policy = default.policy;
        if rest != default {
            return Err(ApiError::BadRequest(
                "seed and config lines are fixed when the session opens".into(),
            ));
        }
        if sc.config.policy != default.policy {
            steps.push(Step::Policy(sc.config.policy));
        }
        steps.extend(sc.steps);
    }
    steps.extend(req.steps);
    Ok(steps)
}

async fn apply_steps(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<StepsRequest>,
) -> Result<Json<StepsResponse>, ApiError> {
    let session = app.session(id)?;
    let steps = session_steps(req)?;
    blocking(move || {
        let mut runner = lock(&session)?;
        let results = steps.iter().map(|s| runner.step(s).clone()).collect();
        Ok(Json(StepsResponse {
            results,
            aborted: runner.aborted().map(str::to_string),
        }))
    })
    .await
}

async fn session_report(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Json<RunReport>, ApiError> {
    let session = app.session(id)?;
    blocking(move || Ok(Json(lock(&session)?.report()))).await
}

async fn session_state(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Json<StateBundle>, ApiError> {
    let session = app.session(id)?;
    blocking(move || Ok(Json(StateBundle::from_world(lock(&session)?.world())?))).await
}
