//! The Currency Manager: enrollment, pair registration, issuance and
//! redemption, the temporal balance table and conservation checks.
//!
//! The manager never sees transaction records. It learns about a transfer
//! only from the balance reports of the two parties and settles both sides in
//! one step once both reports are in, so the table conserves currency after
//! every settlement. Reports from one client are applied strictly in
//! `report_seq` order; each must name the client's current provenance root as
//! its prior root, which is how a forked (double-spent) state is caught.

mod temporal;

pub use temporal::{
    BalanceRow, ChangeCause, Interval, Opening, TemporalBalanceTable, REMARK_CLOSED,
    REMARK_INITIAL, REMARK_ISSUANCE, REMARK_REDEMPTION, REMARK_UPDATED,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::alert::{Alert, AlertKind};
use crate::balance_mht::empty_root;
use crate::hash::{tag, Digest, Hasher};
use crate::peer_ledger::Purpose;
use crate::types::{Amount, ClientId, PairKey, Tick};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CmError {
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("client {0} is suspended")]
    ClientSuspended(ClientId),
    #[error("amount must be positive, got {0}")]
    NonPositiveAmount(Amount),
    #[error("insufficient balance: {balance} available, {amount} requested")]
    InsufficientBalance { balance: Amount, amount: Amount },
    #[error("issuing {amount} would exceed the supply cap {cap}")]
    SupplyCapExceeded { cap: Amount, amount: Amount },
    #[error("no settled transaction {pair}#{pair_seq}")]
    UnknownTransaction { pair: PairKey, pair_seq: u64 },
    #[error("transaction {pair}#{pair_seq} was already repaired")]
    AlreadyRepaired { pair: PairKey, pair_seq: u64 },
    #[error("report is not from the issuance desk")]
    NotTreasuryReport,
    #[error("report pair {pair} does not include client {client}")]
    ForeignPair { pair: PairKey, client: ClientId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientStatus {
    Active,
    Suspended,
    Disenrolled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub id: ClientId,
    #[serde(with = "crate::signature::hex_bytes")]
    pub public_key: Vec<u8>,
    pub status: ClientStatus,
    pub limit: Option<Amount>,
    pub zone: String,
    pub enrolled_at: Tick,
    pub suspension_cause: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairStatus {
    Pending,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRegistration {
    pub pair: PairKey,
    pub consent_lo: bool,
    pub consent_hi: bool,
}

impl PairRegistration {
    pub fn status(&self) -> PairStatus {
        if self.consent_lo && self.consent_hi {
            PairStatus::Active
        } else {
            PairStatus::Pending
        }
    }
}

/// A party's balance report after a commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub client: ClientId,
    /// Per-client counter, starting at 1.
    pub report_seq: u64,
    pub pair: PairKey,
    pub pair_seq: u64,
    pub delta: Amount,
    pub new_balance: Amount,
    /// Balance tree root after the commit.
    pub mhtr: Digest,
    /// Balance tree root before the commit.
    pub prior_mhtr: Digest,
    /// The counterpart's balance tree root before the commit, as carried in
    /// the shared record.
    pub peer_provenance: Digest,
    pub timestamp: Tick,
    pub purpose: Purpose,
}

impl BalanceReport {
    pub fn digest(&self, hasher: &Hasher) -> Digest {
        let purpose = match self.purpose {
            Purpose::Transfer => [0u8; 9],
            Purpose::Issuance => {
                let mut p = [0u8; 9];
                p[0] = 1;
                p
            }
            Purpose::Redemption => {
                let mut p = [0u8; 9];
                p[0] = 2;
                p
            }
            Purpose::Reparation { original_seq } => {
                let mut p = [3u8; 9];
                p[1..].copy_from_slice(&original_seq.to_be_bytes());
                p
            }
        };
        hasher.tagged(
            tag::REPORT,
            &[
                &self.client.to_be_bytes(),
                &self.report_seq.to_be_bytes(),
                &self.pair.lo().to_be_bytes(),
                &self.pair.hi().to_be_bytes(),
                &self.pair_seq.to_be_bytes(),
                &self.delta.to_be_bytes(),
                &self.new_balance.to_be_bytes(),
                self.mhtr.as_bytes(),
                self.prior_mhtr.as_bytes(),
                self.peer_provenance.as_bytes(),
                &self.timestamp.to_be_bytes(),
                &purpose,
            ],
        )
    }

    pub fn counterpart(&self) -> Option<ClientId> {
        self.pair.other(self.client)
    }
}

/// A balance tree root the manager has accepted for a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhtrAttestation {
    pub client: ClientId,
    pub report_seq: u64,
    pub mhtr: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmEvent {
    Settled {
        pair: PairKey,
        pair_seq: u64,
        stamps: Vec<u64>,
    },
    Attested(MhtrAttestation),
    Alert(Alert),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConservationVerdict {
    Holds { sum: Amount },
    Violated { sum: Amount, expected: Amount, discrepancy: Amount },
}

impl ConservationVerdict {
    pub fn holds(&self) -> bool {
        matches!(self, ConservationVerdict::Holds { .. })
    }

    pub fn sum(&self) -> Amount {
        match *self {
            ConservationVerdict::Holds { sum } | ConservationVerdict::Violated { sum, .. } => sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuanceReceipt {
    pub client: ClientId,
    pub amount: Amount,
    pub timestamp: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedemptionReceipt {
    pub client: ClientId,
    pub amount: Amount,
    pub timestamp: Tick,
}

/// Compensating transfer that reverses a settled transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReparationRecord {
    pub pair: PairKey,
    pub original_seq: u64,
    pub payer: ClientId,
    pub payee: ClientId,
    pub amount: Amount,
    pub timestamp: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SupplyEvent {
    at: Tick,
    issued: Amount,
    redeemed: Amount,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Inbox {
    next_seq: u64,
    buffered: BTreeMap<u64, BalanceReport>,
    consumed: BTreeMap<u64, Digest>,
}

/// Totals the manager publishes for balance recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerView {
    pub total_issued: Amount,
    pub total_redeemed: Amount,
    pub open_balances: BTreeMap<ClientId, Amount>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurrencyManager {
    #[serde(skip)]
    hasher: Hasher,
    supply_cap: Amount,
    clients: BTreeMap<ClientId, ClientEntry>,
    enrollment_order: Vec<ClientId>,
    next_id: u64,
    #[serde(with = "crate::types::map_entries")]
    pairs: BTreeMap<PairKey, PairRegistration>,
    table: TemporalBalanceTable,
    total_issued: Amount,
    total_redeemed: Amount,
    supply_events: Vec<SupplyEvent>,
    inboxes: BTreeMap<ClientId, Inbox>,
    #[serde(with = "crate::types::map_entries")]
    treasury_legs: BTreeMap<(PairKey, u64), BalanceReport>,
    repaired: BTreeSet<(PairKey, u64)>,
    last_discrepancy: Amount,
    /// Transactions whose other leg was refused as stale.
    #[serde(default)]
    orphaned: BTreeSet<(PairKey, u64)>,
}

pub const DEFAULT_SUPPLY_CAP: Amount = 1_000_000_000_000;

impl CurrencyManager {
    pub fn new(hasher: Hasher) -> Self {
        Self::with_supply_cap(hasher, DEFAULT_SUPPLY_CAP)
    }

    pub fn with_supply_cap(hasher: Hasher, supply_cap: Amount) -> Self {
        CurrencyManager {
            hasher,
            supply_cap,
            clients: BTreeMap::new(),
            enrollment_order: Vec::new(),
            next_id: 1,
            pairs: BTreeMap::new(),
            table: TemporalBalanceTable::new(),
            total_issued: 0,
            total_redeemed: 0,
            supply_events: Vec::new(),
            inboxes: BTreeMap::new(),
            treasury_legs: BTreeMap::new(),
            orphaned: BTreeSet::new(),
            repaired: BTreeSet::new(),
            last_discrepancy: 0,
        }
    }

    /// Restores the hasher after deserialization.
    pub fn rehydrate(mut self, hasher: Hasher) -> Self {
        self.hasher = hasher;
        self
    }

    pub fn supply_cap(&self) -> Amount {
        self.supply_cap
    }

    pub fn enroll(&mut self, public_key: Vec<u8>, limit: Option<Amount>, zone: impl Into<String>, at: Tick) -> ClientId {
        let id = ClientId(self.next_id);
        self.next_id += 1;
        self.clients.insert(
            id,
            ClientEntry {
                id,
                public_key,
                status: ClientStatus::Active,
                limit,
                zone: zone.into(),
                enrolled_at: at,
                suspension_cause: None,
            },
        );
        self.enrollment_order.push(id);
        self.table.add_client(id, at, empty_root(&self.hasher));
        self.inboxes.insert(
            id,
            Inbox {
                next_seq: 1,
                ..Default::default()
            },
        );
        let desk = PairKey::new(ClientId::TREASURY, id).expect("client ids start at 1");
        self.pairs.insert(
            desk,
            PairRegistration {
                pair: desk,
                consent_lo: true,
                consent_hi: true,
            },
        );
        id
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientEntry> {
        self.clients.get(&id)
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientEntry> {
        self.enrollment_order.iter().filter_map(|id| self.clients.get(id))
    }

    /// Enrolled, not disenrolled clients in enrollment order.
    pub fn enrollment_order(&self) -> Vec<ClientId> {
        self.enrollment_order
            .iter()
            .copied()
            .filter(|id| self.status(*id).is_some_and(|s| s != ClientStatus::Disenrolled))
            .collect()
    }

    pub fn status(&self, id: ClientId) -> Option<ClientStatus> {
        self.clients.get(&id).map(|c| c.status)
    }

    fn known(&self, id: ClientId) -> Result<&ClientEntry, CmError> {
        match self.clients.get(&id) {
            Some(c) if c.status != ClientStatus::Disenrolled => Ok(c),
            _ => Err(CmError::UnknownClient(id)),
        }
    }

    fn active(&self, id: ClientId) -> Result<&ClientEntry, CmError> {
        let c = self.known(id)?;
        if c.status == ClientStatus::Suspended {
            return Err(CmError::ClientSuspended(id));
        }
        Ok(c)
    }

    pub fn register_pair(
        &mut self,
        a: ClientId,
        b: ClientId,
        consent_a: bool,
        consent_b: bool,
    ) -> Result<PairRegistration, CmError> {
        self.active(a)?;
        self.active(b)?;
        let pair = PairKey::new(a, b).ok_or(CmError::UnknownClient(a))?;
        let (c_lo, c_hi) = if pair.lo() == a {
            (consent_a, consent_b)
        } else {
            (consent_b, consent_a)
        };
        let reg = self.pairs.entry(pair).or_insert(PairRegistration {
            pair,
            consent_lo: false,
            consent_hi: false,
        });
        reg.consent_lo |= c_lo;
        reg.consent_hi |= c_hi;
        Ok(*reg)
    }

    pub fn pair_registration(&self, pair: PairKey) -> Option<PairRegistration> {
        self.pairs.get(&pair).copied()
    }

    /// Registered client pairs (issuance-desk pairs excluded).
    pub fn pairs(&self) -> impl Iterator<Item = &PairRegistration> {
        self.pairs.values().filter(|p| !p.pair.involves_treasury())
    }

    /// Both consents given and neither side suspended or disenrolled.
    pub fn pair_usable(&self, pair: PairKey) -> bool {
        let active = |id: ClientId| id.is_treasury() || self.active(id).is_ok();
        self.pairs
            .get(&pair)
            .is_some_and(|r| r.status() == PairStatus::Active)
            && active(pair.lo())
            && active(pair.hi())
    }

    pub fn suspend(&mut self, id: ClientId, cause: impl Into<String>) -> Result<(), CmError> {
        self.known(id)?;
        let c = self.clients.get_mut(&id).expect("checked above");
        c.status = ClientStatus::Suspended;
        c.suspension_cause = Some(cause.into());
        Ok(())
    }

    pub fn disenroll(&mut self, id: ClientId) -> Result<(), CmError> {
        self.known(id)?;
        self.clients.get_mut(&id).expect("checked above").status = ClientStatus::Disenrolled;
        Ok(())
    }

    /// Authorizes an issuance. The balance moves when the desk's commit and
    /// the client's report are both in.
    pub fn issue(&self, client: ClientId, amount: Amount, timestamp: Tick) -> Result<IssuanceReceipt, CmError> {
        self.active(client)?;
        if amount <= 0 {
            return Err(CmError::NonPositiveAmount(amount));
        }
        let in_flight: Amount = self
            .treasury_legs
            .values()
            .map(|l| -l.delta)
            .filter(|d| *d > 0)
            .sum();
        if self.outstanding() + in_flight + amount > self.supply_cap {
            return Err(CmError::SupplyCapExceeded {
                cap: self.supply_cap,
                amount,
            });
        }
        Ok(IssuanceReceipt {
            client,
            amount,
            timestamp,
        })
    }

    pub fn redeem(&self, client: ClientId, amount: Amount, timestamp: Tick) -> Result<RedemptionReceipt, CmError> {
        self.known(client)?;
        if amount <= 0 {
            return Err(CmError::NonPositiveAmount(amount));
        }
        let balance = self.open_balance(client);
        if amount > balance {
            return Err(CmError::InsufficientBalance { balance, amount });
        }
        Ok(RedemptionReceipt {
            client,
            amount,
            timestamp,
        })
    }

    /// Records the issuance desk's side of a committed desk transaction.
    pub fn record_treasury_leg(&mut self, leg: BalanceReport, now: Tick) -> Result<Vec<CmEvent>, CmError> {
        if !leg.client.is_treasury() {
            return Err(CmError::NotTreasuryReport);
        }
        let client = leg.counterpart().ok_or(CmError::ForeignPair {
            pair: leg.pair,
            client: leg.client,
        })?;
        self.known(client)?;
        self.treasury_legs.insert((leg.pair, leg.pair_seq), leg);
        Ok(self.try_settle(now))
    }

    pub fn report_balance(&mut self, report: BalanceReport, now: Tick) -> Result<Vec<CmEvent>, CmError> {
        self.known(report.client)?;
        if !report.pair.contains(report.client) {
            return Err(CmError::ForeignPair {
                pair: report.pair,
                client: report.client,
            });
        }
        let digest = report.digest(&self.hasher);
        let inbox = self.inboxes.get_mut(&report.client).expect("inbox per client");
        let seq = report.report_seq;
        let conflicting = if let Some(prev) = inbox.consumed.get(&seq) {
            Some(*prev != digest)
        } else {
            inbox
                .buffered
                .get(&seq)
                .map(|prev| prev.digest(&self.hasher) != digest)
        };
        match conflicting {
            Some(false) => return Ok(Vec::new()),
            Some(true) => {
                let alert = Alert::new(AlertKind::StaleProvenance, vec![report.client], now)
                    .with_evidence(format!("report_seq={seq}"))
                    .with_evidence("conflicting-report");
                return Ok(vec![CmEvent::Alert(alert)]);
            }
            None => {}
        }
        if seq < inbox.next_seq {
            let alert = Alert::new(AlertKind::StaleProvenance, vec![report.client], now)
                .with_evidence(format!("report_seq={seq}"))
                .with_evidence("out-of-sequence");
            return Ok(vec![CmEvent::Alert(alert)]);
        }
        inbox.buffered.insert(seq, report);
        Ok(self.try_settle(now))
    }

    fn head(&self, client: ClientId) -> Option<&BalanceReport> {
        let inbox = self.inboxes.get(&client)?;
        inbox.buffered.get(&inbox.next_seq)
    }

    fn consume(&mut self, client: ClientId) {
        let hasher = self.hasher.clone();
        let inbox = self.inboxes.get_mut(&client).expect("inbox per client");
        if let Some(r) = inbox.buffered.remove(&inbox.next_seq) {
            inbox.consumed.insert(inbox.next_seq, r.digest(&hasher));
        }
        inbox.next_seq += 1;
    }

    fn stale(&self, r: &BalanceReport) -> bool {
        self.table.provenance(r.client) != Some(r.prior_mhtr)
    }

    fn try_settle(&mut self, now: Tick) -> Vec<CmEvent> {
        let mut events = Vec::new();
        loop {
            let mut progress = false;
            let heads: Vec<ClientId> = self
                .inboxes
                .keys()
                .copied()
                .filter(|c| self.head(*c).is_some())
                .collect();
            for client in heads {
                let Some(r) = self.head(client).cloned() else {
                    continue;
                };
                if self.stale(&r) {
                    let expected = self.table.provenance(client).unwrap_or_default();
                    events.push(CmEvent::Alert(
                        Alert::for_pair(AlertKind::StaleProvenance, r.pair, r.pair_seq, now)
                            .with_subjects(vec![client])
                            .with_evidence(format!("prior={}", r.prior_mhtr))
                            .with_evidence(format!("expected={expected}")),
                    ));
                    self.consume(client);
                    let other = r.counterpart().expect("pair contains reporter");
                    if other.is_treasury() {
                        self.treasury_legs.remove(&(r.pair, r.pair_seq));
                    } else {
                        self.orphaned.insert((r.pair, r.pair_seq));
                    }
                    progress = true;
                    continue;
                }
                if self.orphaned.remove(&(r.pair, r.pair_seq)) {
                    self.consume(client);
                    events.extend(self.settle(vec![r], None, now));
                    progress = true;
                    continue;
                }
                let other = r.counterpart().expect("pair contains reporter");
                if other.is_treasury() {
                    let Some(leg) = self.treasury_legs.remove(&(r.pair, r.pair_seq)) else {
                        continue;
                    };
                    self.consume(client);
                    events.extend(self.settle(vec![r], Some(leg), now));
                    progress = true;
                } else {
                    let Some(o) = self.head(other).cloned() else {
                        continue;
                    };
                    if o.pair != r.pair || o.pair_seq != r.pair_seq || self.stale(&o) {
                        continue;
                    }
                    self.consume(client);
                    self.consume(other);
                    if r.peer_provenance != o.prior_mhtr || o.peer_provenance != r.prior_mhtr {
                        events.push(CmEvent::Alert(
                            Alert::for_pair(AlertKind::StaleProvenance, r.pair, r.pair_seq, now)
                                .with_evidence("peer-provenance"),
                        ));
                    } else {
                        events.extend(self.settle(vec![r, o], None, now));
                    }
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
        events
    }

    fn settle(&mut self, legs: Vec<BalanceReport>, desk: Option<BalanceReport>, now: Tick) -> Vec<CmEvent> {
        let first = &legs[0];
        let (pair, pair_seq, at) = (first.pair, first.pair_seq, first.timestamp);
        let openings = legs
            .iter()
            .map(|r| Opening {
                client: r.client,
                balance: r.new_balance,
                from: r.timestamp,
                provenance: r.mhtr,
                remarks: remark_for(r.purpose, r.pair),
                cause: Some(ChangeCause {
                    pair: r.pair,
                    pair_seq: r.pair_seq,
                    delta: r.delta,
                }),
            })
            .collect();
        if let Some(d) = desk {
            let moved = -d.delta;
            let (issued, redeemed) = if moved > 0 { (moved, 0) } else { (0, -moved) };
            self.total_issued += issued;
            self.total_redeemed += redeemed;
            self.supply_events.push(SupplyEvent {
                at: d.timestamp,
                issued,
                redeemed,
            });
        }
        let stamps = self.table.settle(openings);
        let mut events = vec![CmEvent::Settled {
            pair,
            pair_seq,
            stamps,
        }];
        for r in &legs {
            events.push(CmEvent::Attested(MhtrAttestation {
                client: r.client,
                report_seq: r.report_seq,
                mhtr: r.mhtr,
            }));
        }
        let verdict = self.check_conservation(at);
        let discrepancy = match verdict {
            ConservationVerdict::Holds { .. } => 0,
            ConservationVerdict::Violated { discrepancy, .. } => discrepancy,
        };
        if discrepancy != self.last_discrepancy {
            if discrepancy != 0 {
                events.push(CmEvent::Alert(
                    Alert::for_pair(AlertKind::ConservationViolation, pair, pair_seq, now)
                        .with_subjects(legs.iter().map(|r| r.client).collect())
                        .with_evidence(format!("discrepancy={discrepancy}")),
                ));
            }
            self.last_discrepancy = discrepancy;
        }
        events
    }

    pub fn total_issued(&self) -> Amount {
        self.total_issued
    }

    pub fn total_redeemed(&self) -> Amount {
        self.total_redeemed
    }

    pub fn outstanding(&self) -> Amount {
        self.total_issued - self.total_redeemed
    }

    /// Issued minus redeemed as of `at`.
    pub fn outstanding_at(&self, at: Tick) -> Amount {
        self.supply_events
            .iter()
            .filter(|e| e.at <= at)
            .map(|e| e.issued - e.redeemed)
            .sum()
    }

    /// Balance the issuance desk holds: the cap minus what is in circulation.
    pub fn treasury_balance(&self) -> Amount {
        self.supply_cap - self.outstanding()
    }

    pub fn check_conservation(&self, at: Tick) -> ConservationVerdict {
        let sum = self.table.sum_at(at);
        let expected = self.outstanding_at(at);
        verdict(sum, expected)
    }

    /// Sum of open rows against current totals.
    pub fn check_conservation_now(&self) -> ConservationVerdict {
        verdict(self.table.sum_open(), self.outstanding())
    }

    pub fn table(&self) -> &TemporalBalanceTable {
        &self.table
    }

    pub fn open_balance(&self, client: ClientId) -> Amount {
        self.table.open_balance(client)
    }

    /// The provenance root of the client's open row.
    pub fn latest_mhtr(&self, client: ClientId) -> Option<Digest> {
        self.table.provenance(client)
    }

    /// Latest accepted root with its report sequence number.
    pub fn latest_attestation(&self, client: ClientId) -> Option<MhtrAttestation> {
        let inbox = self.inboxes.get(&client)?;
        Some(MhtrAttestation {
            client,
            report_seq: inbox.next_seq - 1,
            mhtr: self.table.provenance(client)?,
        })
    }

    /// Sequence number the manager expects next from `client`.
    pub fn next_report_seq(&self, client: ClientId) -> Option<u64> {
        self.inboxes.get(&client).map(|i| i.next_seq)
    }

    /// Reports received but not yet settled.
    pub fn pending_reports(&self) -> usize {
        self.inboxes.values().map(|i| i.buffered.len()).sum::<usize>() + self.treasury_legs.len()
    }

    pub fn manager_view(&self) -> ManagerView {
        ManagerView {
            total_issued: self.total_issued,
            total_redeemed: self.total_redeemed,
            open_balances: self
                .enrollment_order
                .iter()
                .map(|c| (*c, self.table.open_balance(*c)))
                .collect(),
        }
    }

    /// Derives the compensating transfer for a settled transaction from the
    /// change causes recorded in the table.
    pub fn repair(&mut self, pair: PairKey, pair_seq: u64, timestamp: Tick) -> Result<ReparationRecord, CmError> {
        let rows = self.table.rows_caused_by(pair, pair_seq);
        if rows.is_empty() {
            return Err(CmError::UnknownTransaction { pair, pair_seq });
        }
        if self.repaired.contains(&(pair, pair_seq)) {
            return Err(CmError::AlreadyRepaired { pair, pair_seq });
        }
        let row = rows[0];
        let cause = row.cause.expect("caused rows carry a cause");
        // The reversal flows opposite to the original transfer.
        let (payer, payee) = if cause.delta > 0 {
            (row.client, pair.other(row.client).expect("row client in pair"))
        } else {
            (pair.other(row.client).expect("row client in pair"), row.client)
        };
        self.repaired.insert((pair, pair_seq));
        Ok(ReparationRecord {
            pair,
            original_seq: pair_seq,
            payer,
            payee,
            amount: cause.delta.abs(),
            timestamp,
        })
    }
}

fn verdict(sum: Amount, expected: Amount) -> ConservationVerdict {
    if sum == expected {
        ConservationVerdict::Holds { sum }
    } else {
        ConservationVerdict::Violated {
            sum,
            expected,
            discrepancy: sum - expected,
        }
    }
}

fn remark_for(purpose: Purpose, pair: PairKey) -> String {
    match purpose {
        Purpose::Transfer => REMARK_UPDATED.to_string(),
        Purpose::Issuance => REMARK_ISSUANCE.to_string(),
        Purpose::Redemption => REMARK_REDEMPTION.to_string(),
        Purpose::Reparation { original_seq } => format!("Reparation of {pair}#{original_seq}"),
    }
}
