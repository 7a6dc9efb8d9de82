//! Fault kinds and the detection each one must produce.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alert::AlertKind;
use crate::types::{Amount, ClientId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultSpec {
    /// Flip `mask` into byte `byte` of leaf `leaf` of `client`'s tree for the
    /// pair with `peer`, right after the next commit on that pair.
    TamperLeaf {
        client: ClientId,
        peer: ClientId,
        leaf: usize,
        byte: usize,
        mask: u8,
    },
    /// `client` forgets its latest balance record and spends again.
    DoubleSpend { client: ClientId },
    /// Re-send `client`'s latest transaction report as a new message.
    ReplayReport { client: ClientId },
    /// Inflate `client`'s next balance report by `extra`.
    ForgeBalance { client: ClientId, extra: Amount },
    /// `client` dies right after its next commit; its reports never leave.
    CrashClient { client: ClientId },
    /// Messages to either manager are held for `duration` ticks.
    PartitionManager { duration: Tick },
    /// The next data-client query loses its `index`-th record.
    OmitRecordInQuery { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    TamperLeaf,
    DoubleSpend,
    ReplayReport,
    ForgeBalance,
    CrashClient,
    PartitionManager,
    OmitRecordInQuery,
}

impl FaultSpec {
    pub fn kind(&self) -> FaultKind {
        match self {
            FaultSpec::TamperLeaf { .. } => FaultKind::TamperLeaf,
            FaultSpec::DoubleSpend { .. } => FaultKind::DoubleSpend,
            FaultSpec::ReplayReport { .. } => FaultKind::ReplayReport,
            FaultSpec::ForgeBalance { .. } => FaultKind::ForgeBalance,
            FaultSpec::CrashClient { .. } => FaultKind::CrashClient,
            FaultSpec::PartitionManager { .. } => FaultKind::PartitionManager,
            FaultSpec::OmitRecordInQuery { .. } => FaultKind::OmitRecordInQuery,
        }
    }
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::TamperLeaf => "TamperLeaf",
            FaultKind::DoubleSpend => "DoubleSpend",
            FaultKind::ReplayReport => "ReplayReport",
            FaultKind::ForgeBalance => "ForgeBalance",
            FaultKind::CrashClient => "CrashClient",
            FaultKind::PartitionManager => "PartitionManager",
            FaultKind::OmitRecordInQuery => "OmitRecordInQuery",
        }
    }

    /// The alert this fault must raise, if it raises one.
    pub fn expected_alert(self) -> Option<AlertKind> {
        match self {
            FaultKind::TamperLeaf | FaultKind::ReplayReport => Some(AlertKind::RootMismatch),
            FaultKind::DoubleSpend => Some(AlertKind::StaleProvenance),
            FaultKind::ForgeBalance => Some(AlertKind::ConservationViolation),
            FaultKind::CrashClient => Some(AlertKind::MissingCounterpartReport),
            FaultKind::PartitionManager | FaultKind::OmitRecordInQuery => None,
        }
    }

    /// Human-readable expected outcome.
    pub fn expectation(self) -> &'static str {
        match self {
            FaultKind::TamperLeaf => "exactly one RootMismatch naming the pair",
            FaultKind::DoubleSpend => "StaleProvenance from the currency manager",
            FaultKind::ReplayReport => "replay alert from the integrity manager",
            FaultKind::ForgeBalance => "ConservationViolation",
            FaultKind::CrashClient => "MissingCounterpartReport naming the crashed client",
            FaultKind::PartitionManager => "no alert once the partition heals",
            FaultKind::OmitRecordInQuery => "verdict with complete = false",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether an injected fault was followed by its expected detection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub fault: FaultSpec,
    pub injected_at: Tick,
    pub detected: bool,
    pub detail: String,
}
