//! Request and response bodies. Shared with the client crate.

use ddcs_core::data_client::Verdict;
use ddcs_core::harness::{ProofQuery, RunReport, StateBundle, Step, StepResult, WorldConfig};
use ddcs_core::types::ClientId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRequest {
    /// Scenario text, line format or JSON.
    pub scenario: String,
    /// Overrides the scenario's own seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Return the final state as a bundle.
    #[serde(default)]
    pub include_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub passed: bool,
    pub report: RunReport,
    #[serde(default)]
    pub state: Option<StateBundle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRequest {
    pub state: StateBundle,
    /// Grid in text form; the bundle's own grid when absent.
    #[serde(default)]
    pub grid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridResponse {
    pub matches: bool,
    pub rows: Vec<ClientId>,
    pub columns: Vec<ClientId>,
    /// Localized (row, column) cells.
    pub cells: Vec<(ClientId, ClientId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub state: StateBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub tsv: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProveRequest {
    pub state: StateBundle,
    /// Client answering the query. For pair queries defaults to the
    /// non-desk member of the pair.
    #[serde(default)]
    pub subject: Option<ClientId>,
    pub query: ProofQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProveResponse {
    /// Encoded verification object, standard base64.
    pub vo: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRequest {
    /// Encoded verification object, standard base64.
    pub vo: String,
    /// Key directory in text form.
    pub keys: String,
    /// Supplies the latest roots for the freshness check.
    #[serde(default)]
    pub state: Option<StateBundle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResponse {
    pub verdict: Verdict,
    pub ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    #[serde(default)]
    pub config: WorldConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: u64,
}

/// Steps as scenario text, as structured steps, or both (text first).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepsRequest {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepsResponse {
    pub results: Vec<StepResult>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub error: String,
}
