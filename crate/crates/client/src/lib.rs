//! Async client for the ddcs HTTP service. Request and response types come
//! from [`ddcs_service::api`].

use ddcs_service::api::*;
use ddcs_service::core::harness::{RunReport, StateBundle, Step};
use ddcs_service::core::harness::WorldConfig;
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use ddcs_service::api;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service returned {status} ({kind}): {message}")]
    Api {
        status: u16,
        kind: String,
        message: String,
    },
}

impl ClientError {
    /// True for 4xx answers: the request itself was at fault.
    pub fn is_client_fault(&self) -> bool {
        matches!(self, ClientError::Api { status, .. } if (400..500).contains(status))
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Client {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&(impl Serialize + ?Sized)>,
    ) -> Result<T, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(e) => ClientError::Api {
                status: status.as_u16(),
                kind: e.kind,
                message: e.error,
            },
            Err(_) => ClientError::Api {
                status: status.as_u16(),
                kind: status.canonical_reason().unwrap_or("error").to_lowercase(),
                message: text,
            },
        })
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.send(Method::GET, "/v1/health", None::<&()>).await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<RunResponse, ClientError> {
        self.send(Method::POST, "/v1/run", Some(req)).await
    }

    pub async fn verify_grid(&self, req: &GridRequest) -> Result<GridResponse, ClientError> {
        self.send(Method::POST, "/v1/grid/verify", Some(req)).await
    }

    pub async fn export_balances(&self, state: StateBundle) -> Result<String, ClientError> {
        let r: ExportResponse = self
            .send(Method::POST, "/v1/balances/export", Some(&ExportRequest { state }))
            .await?;
        Ok(r.tsv)
    }

    pub async fn prove(&self, req: &ProveRequest) -> Result<ProveResponse, ClientError> {
        self.send(Method::POST, "/v1/prove", Some(req)).await
    }

    pub async fn check(&self, req: &CheckRequest) -> Result<CheckResponse, ClientError> {
        self.send(Method::POST, "/v1/check", Some(req)).await
    }

    pub async fn open_session(&self, config: WorldConfig) -> Result<u64, ClientError> {
        let r: SessionCreated = self
            .send(Method::POST, "/v1/sessions", Some(&SessionRequest { config }))
            .await?;
        Ok(r.id)
    }

    pub async fn step_text(&self, id: u64, text: &str) -> Result<StepsResponse, ClientError> {
        let req = StepsRequest {
            text: Some(text.to_string()),
            steps: Vec::new(),
        };
        self.send(Method::POST, &format!("/v1/sessions/{id}/steps"), Some(&req)).await
    }

    pub async fn steps(&self, id: u64, steps: Vec<Step>) -> Result<StepsResponse, ClientError> {
        let req = StepsRequest { text: None, steps };
        self.send(Method::POST, &format!("/v1/sessions/{id}/steps"), Some(&req)).await
    }

    pub async fn session_report(&self, id: u64) -> Result<RunReport, ClientError> {
        self.send(Method::GET, &format!("/v1/sessions/{id}"), None::<&()>).await
    }

    pub async fn session_state(&self, id: u64) -> Result<StateBundle, ClientError> {
        self.send(Method::GET, &format!("/v1/sessions/{id}/state"), None::<&()>).await
    }

    pub async fn close_session(&self, id: u64) -> Result<(), ClientError> {
        let resp = self
            .http
            .delete(format!("{}/v1/sessions/{id}", self.base))
            .send()
            .await?;
        match resp.status() {
            StatusCode::NO_CONTENT => Ok(()),
            status => {
                let e: ErrorBody = resp.json().await?;
                Err(ClientError::Api {
                    status: status.as_u16(),
                    kind: e.kind,
                    message: e.error,
                })
            }
        }
    }
}
