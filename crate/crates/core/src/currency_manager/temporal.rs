//! Append-only temporal table of client balances.
//!
//! Each database transaction gets a stamp (`T1`, `T2`, ...). Rows are never
//! edited: closing a balance appends a new version of the same fact with its
//! valid-time end filled in. Intervals are closed-open `[from, to)` and an
//! open row ends at [`FOREVER`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hash::Digest;
use crate::types::{Amount, ClientId, PairKey, Tick, TimeLabels, FOREVER};

pub const REMARK_INITIAL: &str = "Initial Balance";
pub const REMARK_CLOSED: &str = "Updated Record";
pub const REMARK_UPDATED: &str = "Updated Balance";
pub const REMARK_ISSUANCE: &str = "Issuance";
pub const REMARK_REDEMPTION: &str = "Redemption";

/// The transaction that moved a balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeCause {
    pub pair: PairKey,
    pub pair_seq: u64,
    pub delta: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub stamp: u64,
    pub client: ClientId,
    pub balance: Amount,
    pub valid_from: Tick,
    pub valid_to: Tick,
    pub provenance: Digest,
    pub remarks: String,
    pub cause: Option<ChangeCause>,
}

impl BalanceRow {
    pub fn is_open(&self) -> bool {
        self.valid_to == FOREVER
    }
}

/// Current version of one valid-time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub balance: Amount,
    pub from: Tick,
    pub to: Tick,
    pub provenance: Digest,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TemporalBalanceTable {
    rows: Vec<BalanceRow>,
    next_stamp: u64,
    /// Latest version of each interval per client; the enrollment interval
    /// of balance zero is kept here but never written as a row.
    intervals: BTreeMap<ClientId, Vec<Interval>>,
    materialized: BTreeMap<ClientId, bool>,
}

/// One row to open during a settlement.
#[derive(Debug, Clone)]
pub struct Opening {
    pub client: ClientId,
    pub balance: Amount,
    pub from: Tick,
    pub provenance: Digest,
    pub remarks: String,
    pub cause: Option<ChangeCause>,
}

impl TemporalBalanceTable {
    pub fn new() -> Self {
        TemporalBalanceTable {
            next_stamp: 1,
            ..Default::default()
        }
    }

    pub fn rows(&self) -> &[BalanceRow] {
        &self.rows
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.intervals.keys().copied()
    }

    /// Starts tracking `client` with balance zero from `at`.
    pub fn add_client(&mut self, client: ClientId, at: Tick, provenance: Digest) {
        self.intervals.entry(client).or_insert_with(|| {
            vec![Interval {
                balance: 0,
                from: at,
                to: FOREVER,
                provenance,
            }]
        });
        self.materialized.entry(client).or_insert(false);
    }

    pub fn open_interval(&self, client: ClientId) -> Option<&Interval> {
        self.intervals.get(&client).and_then(|v| v.last())
    }

    pub fn open_balance(&self, client: ClientId) -> Amount {
        self.open_interval(client).map_or(0, |i| i.balance)
    }

    pub fn provenance(&self, client: ClientId) -> Option<Digest> {
        self.open_interval(client).map(|i| i.provenance)
    }

    pub fn intervals(&self, client: ClientId) -> &[Interval] {
        self.intervals.get(&client).map_or(&[], Vec::as_slice)
    }

    /// True once a real row exists for `client`.
    pub fn has_rows(&self, client: ClientId) -> bool {
        self.materialized.get(&client).copied().unwrap_or(false)
    }

    /// Balance valid at `at`, or `None` before enrollment.
    pub fn balance_at(&self, client: ClientId, at: Tick) -> Option<Amount> {
        self.intervals(client)
            .iter()
            .find(|i| i.from <= at && at < i.to)
            .map(|i| i.balance)
    }

    pub fn sum_at(&self, at: Tick) -> Amount {
        self.intervals
            .keys()
            .filter_map(|c| self.balance_at(*c, at))
            .sum()
    }

    pub fn sum_open(&self) -> Amount {
        self.intervals.values().filter_map(|v| v.last()).map(|i| i.balance).sum()
    }

    /// Applies one settlement: a stamp closing the open rows of every
    /// client in `openings` (skipped when none are materialized) followed by
    /// a stamp opening their new rows. Returns the stamps used.
    pub fn settle(&mut self, openings: Vec<Opening>) -> Vec<u64> {
        let mut stamps = Vec::new();
        let closing: Vec<&Opening> = openings.iter().filter(|o| self.has_rows(o.client)).collect();
        if !closing.is_empty() {
            let stamp = self.take_stamp();
            stamps.push(stamp);
            let mut closures = Vec::new();
            for o in closing {
                let prev = self
                    .rows
                    .iter()
                    .rev()
                    .find(|r| r.client == o.client && r.is_open())
                    .expect("materialized client has an open row")
                    .clone();
                closures.push(BalanceRow {
                    stamp,
                    valid_to: o.from,
                    remarks: REMARK_CLOSED.to_string(),
                    ..prev
                });
            }
            self.rows.extend(closures);
        }
        let stamp = self.take_stamp();
        stamps.push(stamp);
        for o in openings {
            let ivs = self.intervals.entry(o.client).or_default();
            if let Some(last) = ivs.last_mut() {
                last.to = o.from;
            }
            ivs.push(Interval {
                balance: o.balance,
                from: o.from,
                to: FOREVER,
                provenance: o.provenance,
            });
            let first = !self.materialized.insert(o.client, true).unwrap_or(false);
            self.rows.push(BalanceRow {
                stamp,
                client: o.client,
                balance: o.balance,
                valid_from: o.from,
                valid_to: FOREVER,
                provenance: o.provenance,
                remarks: if first { REMARK_INITIAL.to_string() } else { o.remarks },
                cause: o.cause,
            });
        }
        stamps
    }

    fn take_stamp(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    /// Opening rows (not closures) caused by the given transaction.
    pub fn rows_caused_by(&self, pair: PairKey, pair_seq: u64) -> Vec<&BalanceRow> {
        self.rows
            .iter()
            .filter(|r| r.remarks != REMARK_CLOSED)
            .filter(|r| r.cause.is_some_and(|c| c.pair == pair && c.pair_seq == pair_seq))
            .collect()
    }

    /// Tab-separated export with the columns of the audit table plus the
    /// provenance root.
    pub fn to_tsv(&self, labels: &TimeLabels) -> String {
        let mut out = String::from(
            "Transaction Time-stamp\tClient ID\tValid Balance\tValid From\tValid To\tRemarks\tProvenance\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "T{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.stamp,
                r.client,
                r.balance,
                labels.display(r.valid_from),
                labels.display(r.valid_to),
                r.remarks,
                r.provenance
            ));
        }
        out
    }
}
