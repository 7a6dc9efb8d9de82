//! Deterministic discrete-event simulation of clients and managers.
//!
//! A [`World`] owns every actor and a simulated network. Scenario steps drive
//! it; each protocol message is an event ordered by `(tick, insertion)` so a
//! fixed seed replays byte-identically. Faults are injected through
//! [`FaultSpec`] and each kind has one expected detection.

mod fault;
mod scenario;
mod state;
mod transport;
mod world;

pub use fault::{Detection, FaultKind, FaultSpec};
pub use scenario::{run, run_text, OutcomeKind, RunReport, Runner, Scenario, ScenarioParseError, Step, StepResult};
pub use state::{
    check_vo, export_balances, prove, verify_grid_against_state, ProofQuery, StateBundle, StateError, StateMeta,
};
pub use transport::{DeliveryPolicy, Envelope, Payload};
pub use world::{QueryOutput, TransferOutcome, World, WorldConfig, WorldState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client_node::{NodeError, RecoveryError, SnapshotError};
use crate::currency_manager::CmError;
use crate::data_client::DataClientError;
use crate::integrity_manager::{GridError, ImError};
use crate::types::{ClientId, Tick};

/// Default bound on processed events per run.
pub const DEFAULT_STEP_LIMIT: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    Client(ClientId),
    Cm,
    Im,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Client(id) if id.is_treasury() => f.write_str("desk"),
            Actor::Client(id) => write!(f, "client:{id}"),
            Actor::Cm => f.write_str("cm"),
            Actor::Im => f.write_str("im"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cm" => Ok(Actor::Cm),
            "im" => Ok(Actor::Im),
            "desk" => Ok(Actor::Client(ClientId::TREASURY)),
            _ => s
                .strip_prefix("client:")
                .and_then(|n| n.parse().ok())
                .map(Actor::Client)
                .ok_or_else(|| format!("unknown actor `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("unknown target: {0}")]
    UnknownTarget(String),
    #[error("business time {got} does not follow {last}")]
    NonIncreasingTime { last: Tick, got: Tick },
    #[error("step limit of {0} events exceeded")]
    StepLimitExceeded(u64),
    #[error("simulation stalled: {0}")]
    Stalled(String),
    #[error("invalid delivery policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Cm(#[from] CmError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Im(#[from] ImError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    DataClient(#[from] DataClientError),
}

/// One line per event: `tick|actor|event|details`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationLog {
    lines: Vec<String>,
}

impl SimulationLog {
    pub fn push(&mut self, tick: Tick, actor: impl fmt::Display, event: &str, details: impl fmt::Display) {
        self.lines.push(format!("{tick}|{actor}|{event}|{details}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Lines whose event field equals `event`.
    pub fn events<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.lines
            .iter()
            .filter(move |l| l.split('|').nth(2) == Some(event))
    }

    pub fn to_text(&self) -> String {
        let mut out = self.lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}
