//! The Integrity Manager: cross-validates every peer transaction from the two
//! parties' root reports, cross-checks balance roots against the Currency
//! Manager, archives validated roots and captures the signed grid.
//!
//! The manager holds digests only. It never sees or stores a balance.

mod grid;

pub use grid::{grid_hashes, layout, GridError, GridParseError, GridVerdict, MerkleHashGrid};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::alert::{Alert, AlertKind};
use crate::balance_mht::empty_root;
use crate::hash::{Digest, Hasher};
use crate::signature::{KeyDirectory, Keyring};
use crate::types::{ClientId, PairKey, Tick};

pub const DEFAULT_DEADLINE: Tick = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImError {
    #[error("client {0} is not registered with the integrity manager")]
    UnknownReporter(ClientId),
    #[error("pair {0} is not registered")]
    UnregisteredPair(PairKey),
    #[error("client {client} is not part of pair {pair}")]
    ForeignPair { pair: PairKey, client: ClientId },
}

/// One party's view of a committed transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionReport {
    pub reporter: ClientId,
    pub pair: PairKey,
    pub pair_seq: u64,
    pub epoch: u64,
    pub first_seq: u64,
    pub leaf_count: u64,
    pub pttr: Digest,
    pub record_digest: Digest,
    pub timestamp: Tick,
    /// Full record, sent only for critical transactions.
    pub record_bytes: Option<Vec<u8>>,
}

/// Sent by a party whose commit failed because the two staged roots differed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitFailureNotice {
    pub reporter: ClientId,
    pub pair: PairKey,
    pub pair_seq: u64,
    pub own_root: Digest,
    pub peer_root: Digest,
    pub timestamp: Tick,
}

/// The latest validated state of a pair tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAttestation {
    pub pair: PairKey,
    pub pair_seq: u64,
    pub epoch: u64,
    pub first_seq: u64,
    pub leaf_count: u64,
    pub pttr: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationOutcome {
    /// Waiting for the counterpart or the manager.
    Pending,
    Validated,
    Alert(Alert),
    /// A mismatch on a pair that already has an open alert.
    Suppressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImConfig {
    /// Ticks to wait for a counterpart report or a balance attestation.
    pub deadline: Tick,
    /// Keep full critical records, not just their digests.
    pub store_full_records: bool,
}

impl Default for ImConfig {
    fn default() -> Self {
        ImConfig {
            deadline: DEFAULT_DEADLINE,
            store_full_records: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PendingReport {
    report: TransactionReport,
    due: Tick,
    overdue: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct PairBook {
    pending: BTreeMap<u64, PendingReport>,
    validated: BTreeSet<u64>,
    latest: Option<PairAttestation>,
    /// Validated root per epoch, kept when the pair resets.
    epoch_roots: BTreeMap<u64, Digest>,
    archived: BTreeMap<u64, Digest>,
    flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BalanceSample {
    client: ClientId,
    mhtr: Digest,
    due: Tick,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrityManager {
    #[serde(skip)]
    hasher: Hasher,
    config: ImConfig,
    clients: BTreeSet<ClientId>,
    pairs: BTreeMap<PairKey, PairBook>,
    /// Latest balance root the Currency Manager accepted, per client.
    attested: BTreeMap<ClientId, Digest>,
    #[serde(default)]
    attested_seq: BTreeMap<ClientId, u64>,
    samples: Vec<BalanceSample>,
    records: BTreeMap<Digest, Option<Vec<u8>>>,
}

impl IntegrityManager {
    pub fn new(hasher: Hasher, config: ImConfig) -> Self {
        IntegrityManager {
            hasher,
            config,
            clients: BTreeSet::new(),
            pairs: BTreeMap::new(),
            attested: BTreeMap::new(),
            attested_seq: BTreeMap::new(),
            samples: Vec::new(),
            records: BTreeMap::new(),
        }
    }

    /// Restores the hasher after deserialization.
    pub fn rehydrate(mut self, hasher: Hasher) -> Self {
        self.hasher = hasher;
        self
    }

    pub fn config(&self) -> ImConfig {
        self.config
    }

    pub fn register_client(&mut self, client: ClientId) {
        if self.clients.insert(client) {
            self.attested.insert(client, empty_root(&self.hasher));
        }
    }

    pub fn register_pair(&mut self, pair: PairKey) {
        self.pairs.entry(pair).or_default();
    }

    pub fn is_registered(&self, pair: PairKey) -> bool {
        self.pairs.contains_key(&pair)
    }

    fn book(&mut self, reporter: ClientId, pair: PairKey) -> Result<&mut PairBook, ImError> {
        if !self.clients.contains(&reporter) {
            return Err(ImError::UnknownReporter(reporter));
        }
        if !pair.contains(reporter) {
            return Err(ImError::ForeignPair { pair, client: reporter });
        }
        self.pairs.get_mut(&pair).ok_or(ImError::UnregisteredPair(pair))
    }

    /// Matches a report against its counterpart by `(pair, pair_seq)`.
    pub fn ingest(&mut self, report: TransactionReport, now: Tick) -> Result<ValidationOutcome, ImError> {
        let deadline = self.config.deadline;
        let full = self.config.store_full_records;
        let book = self.book(report.reporter, report.pair)?;
        let (pair, seq) = (report.pair, report.pair_seq);
        if book.validated.contains(&seq) {
            return Ok(ValidationOutcome::Alert(
                Alert::for_pair(AlertKind::RootMismatch, pair, seq, now)
                    .with_subjects(vec![report.reporter])
                    .with_evidence("replay")
                    .with_evidence(format!("pttr={}", report.pttr)),
            ));
        }
        let Some(first) = book.pending.get(&seq) else {
            book.pending.insert(
                seq,
                PendingReport {
                    report,
                    due: now.saturating_add(deadline),
                    overdue: false,
                },
            );
            return Ok(ValidationOutcome::Pending);
        };
        if first.report.reporter == report.reporter {
            if first.report == report {
                // Same report delivered twice before the counterpart's.
                return Ok(ValidationOutcome::Pending);
            }
            return Ok(ValidationOutcome::Alert(
                Alert::for_pair(AlertKind::RootMismatch, pair, seq, now)
                    .with_subjects(vec![report.reporter])
                    .with_evidence("replay")
                    .with_evidence(format!("pttr={}", report.pttr)),
            ));
        }
        let first = book.pending.remove(&seq).expect("checked above").report;
        let agree = first.pttr == report.pttr
            && first.record_digest == report.record_digest
            && first.leaf_count == report.leaf_count
            && first.epoch == report.epoch;
        if !agree {
            if book.flagged {
                return Ok(ValidationOutcome::Suppressed);
            }
            book.flagged = true;
            let (a, b) = ordered(first, report);
            return Ok(ValidationOutcome::Alert(
                Alert::for_pair(AlertKind::RootMismatch, pair, seq, now)
                    .with_evidence(format!("pttr[{}]={}", a.reporter, a.pttr))
                    .with_evidence(format!("pttr[{}]={}", b.reporter, b.pttr)),
            ));
        }
        book.validated.insert(seq);
        let att = PairAttestation {
            pair,
            pair_seq: seq,
            epoch: report.epoch,
            first_seq: report.first_seq,
            leaf_count: report.leaf_count,
            pttr: report.pttr,
        };
        if book.latest.is_none_or(|l| l.pair_seq < seq) {
            book.latest = Some(att);
            book.epoch_roots.insert(att.epoch, att.pttr);
        }
        let bytes = report.record_bytes.or(first.record_bytes);
        self.records
            .insert(report.record_digest, if full { bytes } else { None });
        Ok(ValidationOutcome::Validated)
    }

    /// Raises overdue alerts: counterpart reports and balance samples not
    /// matched by their deadline.
    pub fn tick(&mut self, now: Tick) -> Vec<Alert> {
        let mut alerts = Vec::new();
        for (pair, book) in &mut self.pairs {
            for (seq, p) in &mut book.pending {
                if p.overdue || p.due > now {
                    continue;
                }
                p.overdue = true;
                let missing = pair.other(p.report.reporter).expect("reporter in pair");
                alerts.push(
                    Alert::for_pair(AlertKind::MissingCounterpartReport, *pair, *seq, now)
                        .with_subjects(vec![missing])
                        .with_evidence(format!("missing={missing}"))
                        .with_evidence(format!("pttr={}", p.report.pttr)),
                );
            }
        }
        let (due, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.samples)
            .into_iter()
            .partition(|s| s.due <= now);
        self.samples = waiting;
        for s in due {
            let expected = self.attested.get(&s.client).copied().unwrap_or_default();
            alerts.push(balance_alert(s.client, s.mhtr, expected, now));
        }
        alerts
    }

    /// Reports whose counterpart has not arrived yet.
    pub fn pending_reports(&self) -> usize {
        self.pairs.values().map(|b| b.pending.len()).sum()
    }

    pub fn pending_samples(&self) -> usize {
        self.samples.len()
    }

    /// Earliest tick at which [`tick`](Self::tick) would raise something.
    pub fn next_due(&self) -> Option<Tick> {
        let reports = self
            .pairs
            .values()
            .flat_map(|b| b.pending.values())
            .filter(|p| !p.overdue)
            .map(|p| p.due);
        reports.chain(self.samples.iter().map(|s| s.due)).min()
    }

    /// A failed commit is a root disagreement between the parties.
    pub fn commit_failure(&mut self, notice: CommitFailureNotice, now: Tick) -> Result<ValidationOutcome, ImError> {
        let book = self.book(notice.reporter, notice.pair)?;
        if book.flagged {
            return Ok(ValidationOutcome::Suppressed);
        }
        book.flagged = true;
        Ok(ValidationOutcome::Alert(
            Alert::for_pair(AlertKind::RootMismatch, notice.pair, notice.pair_seq, now)
                .with_evidence("commit-failed")
                .with_evidence(format!("pttr[{}]={}", notice.reporter, notice.own_root))
                .with_evidence(format!(
                    "pttr[{}]={}",
                    notice.pair.other(notice.reporter).expect("reporter in pair"),
                    notice.peer_root
                )),
        ))
    }

    /// Clears the alert flag once a pair has been repaired.
    pub fn clear_flag(&mut self, pair: PairKey) {
        if let Some(b) = self.pairs.get_mut(&pair) {
            b.flagged = false;
        }
    }

    pub fn is_flagged(&self, pair: PairKey) -> bool {
        self.pairs.get(&pair).is_some_and(|b| b.flagged)
    }

    /// Compares the root a client holds with the one the Currency Manager
    /// accepted for the same cycle.
    pub fn cross_check_balance(
        &self,
        client: ClientId,
        from_client: Digest,
        from_manager: Digest,
        now: Tick,
    ) -> ValidationOutcome {
        if from_client == from_manager {
            ValidationOutcome::Validated
        } else {
            ValidationOutcome::Alert(balance_alert(client, from_client, from_manager, now))
        }
    }

    /// Records a balance root the Currency Manager accepted under
    /// `report_seq` and resolves samples waiting for it. An attestation older
    /// than the latest one seen resolves samples but does not replace it.
    pub fn attest_mhtr(&mut self, client: ClientId, report_seq: u64, mhtr: Digest) -> bool {
        self.samples.retain(|s| !(s.client == client && s.mhtr == mhtr));
        if self.attested_seq.get(&client).is_some_and(|s| *s > report_seq) {
            return false;
        }
        self.attested_seq.insert(client, report_seq);
        self.attested.insert(client, mhtr);
        true
    }

    pub fn attested_mhtr(&self, client: ClientId) -> Option<Digest> {
        self.attested.get(&client).copied()
    }

    /// Checks a root sampled from a client. A root the manager has not
    /// attested yet waits until the deadline.
    pub fn sample_balance(&mut self, client: ClientId, mhtr: Digest, now: Tick) -> Result<ValidationOutcome, ImError> {
        let Some(attested) = self.attested.get(&client).copied() else {
            return Err(ImError::UnknownReporter(client));
        };
        if attested == mhtr {
            return Ok(ValidationOutcome::Validated);
        }
        let due = now.saturating_add(self.config.deadline);
        self.samples.push(BalanceSample { client, mhtr, due });
        Ok(ValidationOutcome::Pending)
    }

    pub fn validated(&self, pair: PairKey) -> Option<PairAttestation> {
        self.pairs.get(&pair).and_then(|b| b.latest)
    }

    pub fn is_validated(&self, pair: PairKey, pair_seq: u64) -> bool {
        self.pairs.get(&pair).is_some_and(|b| b.validated.contains(&pair_seq))
    }

    /// Every validated `(pair, pair_seq)`.
    pub fn validated_set(&self) -> BTreeSet<(PairKey, u64)> {
        self.pairs
            .iter()
            .flat_map(|(p, b)| b.validated.iter().map(move |s| (*p, *s)))
            .collect()
    }

    /// Latest validated root of every pair that has one.
    pub fn validated_roots(&self) -> BTreeMap<PairKey, Digest> {
        self.pairs
            .iter()
            .filter_map(|(p, b)| b.latest.filter(|l| l.leaf_count > 0).map(|l| (*p, l.pttr)))
            .collect()
    }

    /// Persists the validated root of `epoch`. Returns it, or `None` when no
    /// report of that epoch was validated.
    pub fn archive(&mut self, pair: PairKey, epoch: u64) -> Option<Digest> {
        let book = self.pairs.get_mut(&pair)?;
        let root = *book.epoch_roots.get(&epoch)?;
        book.archived.insert(epoch, root);
        Some(root)
    }

    pub fn archived_root(&self, pair: PairKey, epoch: u64) -> Option<Digest> {
        self.pairs.get(&pair).and_then(|b| b.archived.get(&epoch).copied())
    }

    pub fn archived_roots(&self, pair: PairKey) -> Vec<(u64, Digest)> {
        self.pairs
            .get(&pair)
            .map(|b| b.archived.iter().map(|(e, d)| (*e, *d)).collect())
            .unwrap_or_default()
    }

    /// Keeps a record digest, and the full record when configured to.
    pub fn store_record(&mut self, digest: Digest, record: Option<Vec<u8>>) {
        let kept = if self.config.store_full_records { record } else { None };
        self.records.insert(digest, kept);
    }

    pub fn has_record(&self, digest: &Digest) -> bool {
        self.records.contains_key(digest)
    }

    pub fn stored_record(&self, digest: &Digest) -> Option<&[u8]> {
        self.records.get(digest).and_then(|r| r.as_deref())
    }

    /// Seeds a fresh instance with the latest roots the peers re-send and the
    /// archives reloaded from storage.
    pub fn restore(&mut self, att: PairAttestation, archived: &[(u64, Digest)]) {
        let book = self.pairs.entry(att.pair).or_default();
        book.validated.insert(att.pair_seq);
        book.epoch_roots.insert(att.epoch, att.pttr);
        book.latest = Some(att);
        book.archived.extend(archived.iter().copied());
    }

    /// Signs the grid over the given roots. Callers supply the quiescence
    /// state: `in_flight` commits must be zero.
    pub fn capture_grid(
        &self,
        keys: &Keyring,
        epoch: u64,
        clients: &[ClientId],
        mhtrs: &BTreeMap<ClientId, Digest>,
        pttrs: &BTreeMap<PairKey, Digest>,
        in_flight: usize,
    ) -> Result<MerkleHashGrid, GridError> {
        if in_flight > 0 {
            return Err(GridError::NotQuiescent(in_flight));
        }
        MerkleHashGrid::capture(&self.hasher, keys, epoch, clients, mhtrs, pttrs)
    }

    pub fn verify_grid(
        &self,
        grid: &MerkleHashGrid,
        keys: &KeyDirectory,
        mhtrs: &BTreeMap<ClientId, Digest>,
        pttrs: &BTreeMap<PairKey, Digest>,
    ) -> Result<GridVerdict, GridError> {
        grid.verify(&self.hasher, keys, mhtrs, pttrs)
    }
}

fn ordered(a: TransactionReport, b: TransactionReport) -> (TransactionReport, TransactionReport) {
    if a.reporter <= b.reporter {
        (a, b)
    } else {
        (b, a)
    }
}

fn balance_alert(client: ClientId, from_client: Digest, from_manager: Digest, now: Tick) -> Alert {
    Alert::new(AlertKind::BalanceCrossCheckFailure, vec![client], now)
        .with_evidence(format!("client={from_client}"))
        .with_evidence(format!("manager={from_manager}"))
}

#[cfg(test)]
mod tests;
