//! Alerts raised by the managers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{ClientId, PairKey, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertKind {
    RootMismatch,
    MissingCounterpartReport,
    BalanceCrossCheckFailure,
    StaleProvenance,
    ConservationViolation,
    GridMismatch,
}

impl AlertKind {
    pub const ALL: [AlertKind; 6] = [
        AlertKind::RootMismatch,
        AlertKind::MissingCounterpartReport,
        AlertKind::BalanceCrossCheckFailure,
        AlertKind::StaleProvenance,
        AlertKind::ConservationViolation,
        AlertKind::GridMismatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlertKind::RootMismatch => "RootMismatch",
            AlertKind::MissingCounterpartReport => "MissingCounterpartReport",
            AlertKind::BalanceCrossCheckFailure => "BalanceCrossCheckFailure",
            AlertKind::StaleProvenance => "StaleProvenance",
            AlertKind::ConservationViolation => "ConservationViolation",
            AlertKind::GridMismatch => "GridMismatch",
        }
    }
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown alert kind `{0}`")]
pub struct UnknownAlertKind(pub String);

impl std::str::FromStr for AlertKind {
    type Err = UnknownAlertKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlertKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownAlertKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub kind: AlertKind,
    pub subjects: Vec<ClientId>,
    pub pair: Option<PairKey>,
    pub pair_seq: Option<u64>,
    /// Digests, sequence numbers or markers such as `replay`.
    pub evidence: Vec<String>,
    pub raised_at: Tick,
}

impl Alert {
    pub fn new(kind: AlertKind, subjects: Vec<ClientId>, raised_at: Tick) -> Self {
        Alert {
            kind,
            subjects,
            pair: None,
            pair_seq: None,
            evidence: Vec::new(),
            raised_at,
        }
    }

    pub fn for_pair(kind: AlertKind, pair: PairKey, pair_seq: u64, raised_at: Tick) -> Self {
        Alert {
            kind,
            subjects: vec![pair.lo(), pair.hi()],
            pair: Some(pair),
            pair_seq: Some(pair_seq),
            evidence: Vec::new(),
            raised_at,
        }
    }

    pub fn with_subjects(mut self, subjects: Vec<ClientId>) -> Self {
        self.subjects = subjects;
        self
    }

    pub fn with_evidence(mut self, e: impl Into<String>) -> Self {
        self.evidence.push(e.into());
        self
    }

    pub fn has_evidence(&self, e: &str) -> bool {
        self.evidence.iter().any(|x| x == e)
    }
}

impl fmt::Display for Alert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        let subjects: Vec<String> = self.subjects.iter().map(|s| s.to_string()).collect();
        write!(f, " subjects={}", subjects.join(","))?;
        if let Some(p) = self.pair {
            write!(f, " pair={p}")?;
        }
        if let Some(s) = self.pair_seq {
            write!(f, " seq={s}")?;
        }
        if !self.evidence.is_empty() {
            write!(f, " evidence={}", self.evidence.join(","))?;
        }
        Ok(())
    }
}
