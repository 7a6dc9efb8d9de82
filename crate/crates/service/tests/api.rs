use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use ddcs_core::harness::{ProofQuery, StateBundle};
use ddcs_core::types::{ClientId, PairKey};
use ddcs_service::api::*;
use ddcs_service::{router, AppState};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

const TABLE4: &str = include_str!("../../../scenarios/table4.scn");
const TABLE5: &str = include_str!("../../../scenarios/table5.scn");

async fn call<T: DeserializeOwned>(app: &Router, method: Method, uri: &str, body: Option<impl Serialize>) -> (StatusCode, T) {
    let (status, bytes) = raw(app, method, uri, body).await;
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, v)
}

async fn raw(app: &Router, method: Method, uri: &str, body: Option<impl Serialize>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn app() -> Router {
    router(AppState::default())
}

async fn run_state(app: &Router, scenario: &str) -> StateBundle {
    let req = RunRequest {
        scenario: scenario.into(),
        seed: None,
        include_state: true,
    };
    let (s, r): (_, RunResponse) = call(app, Method::POST, "/v1/run", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(r.passed);
    r.state.unwrap()
}

#[tokio::test]
async fn health_reports_ok() {
    let (s, h): (_, Health) = call(&app(), Method::GET, "/v1/health", None::<()>).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h.status, "ok");
}

#[tokio::test]
async fn run_returns_report_and_state() {
    let app = app();
    let state = run_state(&app, TABLE4).await;
    let (s, e): (_, ExportResponse) = call(&app, Method::POST, "/v1/balances/export", Some(ExportRequest { state })).await;
    assert_eq!(s, StatusCode::OK);
    let rows: Vec<&str> = e.tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[5].starts_with("T4\t2\t1500\tMay 18 3 PM\t∞\tUpdated Balance"), "{}", rows[5]);
}

#[tokio::test]
async fn seed_override_changes_the_log_not_the_outcome() {
    let app = app();
    let go = |seed| RunRequest {
        scenario: format!("policy delay 1 5 dup 0.3\n{TABLE4}"),
        seed: Some(seed),
        include_state: false,
    };
    let (_, a): (_, RunResponse) = call(&app, Method::POST, "/v1/run", Some(go(1))).await;
    let (_, b): (_, RunResponse) = call(&app, Method::POST, "/v1/run", Some(go(1))).await;
    let (_, c): (_, RunResponse) = call(&app, Method::POST, "/v1/run", Some(go(2))).await;
    assert_eq!(a.report.log, b.report.log);
    assert_ne!(a.report.log, c.report.log);
    assert_eq!(a.report.state, c.report.state);
    assert_eq!(c.report.seed, 2);
}

#[tokio::test]
async fn failing_expectation_is_reported_not_an_error() {
    let req = RunRequest {
        scenario: "enroll 1\nissue 1 10\nexpect balance 1 11\n".into(),
        seed: None,
        include_state: false,
    };
    let (s, r): (_, RunResponse) = call(&app(), Method::POST, "/v1/run", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(!r.passed);
    assert_eq!(r.report.failures().count(), 1);
}

#[tokio::test]
async fn parse_errors_are_bad_requests() {
    let req = RunRequest {
        scenario: "enroll 2\nfly 1 2\n".into(),
        seed: None,
        include_state: false,
    };
    let (s, e): (_, ErrorBody) = call(&app(), Method::POST, "/v1/run", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e.kind, "scenario-parse");
    assert!(e.error.contains("line 2"), "{}", e.error);
}

#[tokio::test]
async fn grid_verification_localizes_a_changed_cell() {
    let app = app();
    let state = run_state(&app, TABLE5).await;
    let grid_text = String::from_utf8(state.get("grid.txt").unwrap().to_vec()).unwrap();
    let req = GridRequest {
        state: state.clone(),
        grid: None,
    };
    let (s, ok): (_, GridResponse) = call(&app, Method::POST, "/v1/grid/verify", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(ok.matches);

    // Replace the (1, 3) cell with the (1, 2) cell.
    let row1 = grid_text.lines().find(|l| l.starts_with("row 1 ")).unwrap();
    let cells: Vec<&str> = row1.split_whitespace().collect();
    let bent_row = row1.replacen(cells[4], cells[3], 1);
    let bent = grid_text.replacen(row1, &bent_row, 1);
    let req = GridRequest {
        state,
        grid: Some(bent),
    };
    let (_, bad): (_, GridResponse) = call(&app, Method::POST, "/v1/grid/verify", Some(req)).await;
    assert!(!bad.matches);
    assert_eq!(bad.cells, vec![(ClientId(1), ClientId(3))]);
}

#[tokio::test]
async fn prove_then_check() {
    let app = app();
    let state = run_state(&app, TABLE5).await;
    let keys = String::from_utf8(state.get("keys.txt").unwrap().to_vec()).unwrap();
    let pair = PairKey::new(ClientId(1), ClientId(2)).unwrap();
    let req = ProveRequest {
        state: state.clone(),
        subject: None,
        query: ProofQuery::Pair { pair, lo: 1, hi: 1 },
    };
    let (s, p): (_, ProveResponse) = call(&app, Method::POST, "/v1/prove", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    let req = CheckRequest {
        vo: p.vo.clone(),
        keys: keys.clone(),
        state: Some(state),
    };
    let (_, c): (_, CheckResponse) = call(&app, Method::POST, "/v1/check", Some(req)).await;
    assert!(c.ok, "{c:?}");

    let req = CheckRequest {
        vo: "not base64!".into(),
        keys,
        state: None,
    };
    let (s, e): (_, ErrorBody) = call(&app, Method::POST, "/v1/check", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e.kind, "bad-request");
}

#[tokio::test]
async fn balance_proofs_need_a_subject() {
    let app = app();
    let state = run_state(&app, TABLE4).await;
    let req = ProveRequest {
        state,
        subject: None,
        query: ProofQuery::Balances {
            lo: ddcs_core::balance_mht::RecordKey::MIN,
            hi: ddcs_core::balance_mht::RecordKey::MAX,
        },
    };
    let (s, _): (_, ErrorBody) = call(&app, Method::POST, "/v1/prove", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn session_lifecycle() {
    let app = app();
    let (s, created): (_, SessionCreated) = call(&app, Method::POST, "/v1/sessions", Some(SessionRequest::default())).await;
    assert_eq!(s, StatusCode::CREATED);
    let base = format!("/v1/sessions/{}", created.id);

    let steps = StepsRequest {
        text: Some("policy delay 1 3\nenroll 2\nregister 1 2\nissue 1 100\ntransfer 1 2 40\nquiesce\nexpect balance 2 40".into()),
        steps: vec![],
    };
    let (s, r): (_, StepsResponse) = call(&app, Method::POST, &format!("{base}/steps"), Some(steps)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r.results.len(), 7);
    assert!(r.results.iter().all(|x| x.ok), "{r:?}");
    assert!(r.results[0].step.starts_with("policy delay 1 3"));

    let (_, report): (_, ddcs_core::harness::RunReport) = call(&app, Method::GET, &base, None::<()>).await;
    assert!(report.passed());
    assert!(report.log.lines().iter().any(|l| l.contains("|commit|")));

    let (s, state): (_, StateBundle) = call(&app, Method::GET, &format!("{base}/state"), None::<()>).await;
    assert_eq!(s, StatusCode::OK);
    assert!(state.client(ClientId(2)).is_ok());

    let bad = StepsRequest {
        text: Some("seed 9\nenroll 1".into()),
        steps: vec![],
    };
    let (s, _): (_, ErrorBody) = call(&app, Method::POST, &format!("{base}/steps"), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = raw(&app, Method::DELETE, &base, None::<()>).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, e): (_, ErrorBody) = call(&app, Method::GET, &base, None::<()>).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(e.kind, "no-session");
}

#[tokio::test]
async fn session_count_is_capped() {
    let app = app();
    for _ in 0..ddcs_service::MAX_SESSIONS {
        let (s, _): (_, SessionCreated) = call(&app, Method::POST, "/v1/sessions", None::<()>).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    let (s, e): (_, ErrorBody) = call(&app, Method::POST, "/v1/sessions", None::<()>).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(e.kind, "too-many-sessions");
}

#[tokio::test]
async fn invalid_session_config_is_unprocessable() {
    let mut config = ddcs_core::harness::WorldConfig::default();
    config.fanout = 1;
    let (s, e): (_, ErrorBody) = call(&app(), Method::POST, "/v1/sessions", Some(SessionRequest { config })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{e:?}");
}
