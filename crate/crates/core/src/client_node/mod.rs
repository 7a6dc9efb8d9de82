//! The Currency Client actor.
//!
//! A node holds one transaction tree per registered peer and its own balance
//! tree. It runs the pairwise exchange as a small state machine: the payer
//! proposes, the payee accepts and returns its staged root, the payer
//! compares roots and confirms (or aborts), and the payee compares again.
//! Both sides commit on matching roots without contacting either manager;
//! reports to the managers leave as ordinary outbound messages afterwards.

mod recovery;
mod snapshot;

pub use recovery::{recover_balance, recover_transactions, RebuiltState, RecoveryError};
pub use snapshot::SnapshotError;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::balance_mht::{BalanceChangeRecord, BalanceMht, BalanceTreeError, RecordKey, DEFAULT_FANOUT};
use crate::currency_manager::BalanceReport;
use crate::hash::{tag, Digest, HashError, Hasher};
use crate::integrity_manager::{CommitFailureNotice, TransactionReport};
use crate::peer_ledger::{
    accept, propose, LedgerError, LocalView, PartyState, PeerTransactionTree, Purpose,
    TransactionPairRecord, TransactionProposal,
};
use crate::signature::{KeyDirectory, Keyring, Signature};
use crate::types::{Amount, ClientId, PairKey, Tick};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Tree(#[from] BalanceTreeError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error("client {0} is in the middle of another exchange")]
    Busy(ClientId),
    #[error("record key {got} does not follow the latest balance record {last}")]
    StaleTimestamp { last: RecordKey, got: RecordKey },
    #[error("peer {0} cannot be reached")]
    PeerUnreachable(ClientId),
}

/// Messages exchanged between the two parties of a transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerMessage {
    Propose(TransactionProposal),
    Accept {
        record: TransactionPairRecord,
        root: Digest,
    },
    Reject {
        pair: PairKey,
        pair_seq: u64,
        reason: String,
    },
    Confirm {
        pair: PairKey,
        pair_seq: u64,
        root: Digest,
    },
    Abort {
        pair: PairKey,
        pair_seq: u64,
        root: Digest,
    },
}

impl PeerMessage {
    pub fn name(&self) -> &'static str {
        match self {
            PeerMessage::Propose(_) => "propose",
            PeerMessage::Accept { .. } => "accept",
            PeerMessage::Reject { .. } => "reject",
            PeerMessage::Confirm { .. } => "confirm",
            PeerMessage::Abort { .. } => "abort",
        }
    }
}

/// Something the node wants delivered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outbound {
    Peer { to: ClientId, msg: PeerMessage },
    Report(TransactionReport),
    Balance(BalanceReport),
    CommitFailure(CommitFailureNotice),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeEvent {
    Committed { pair: PairKey, pair_seq: u64, root: Digest },
    Rejected { pair: PairKey, pair_seq: u64, reason: String },
    Aborted { pair: PairKey, pair_seq: u64 },
}

/// Result of handling one message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reaction {
    pub out: Vec<Outbound>,
    pub events: Vec<NodeEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Exchange {
    Paying(TransactionProposal),
    Receiving(TransactionProposal),
}

/// A leaf flip armed to fire right after the next commit on `pair`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmedTamper {
    pub pair: PairKey,
    pub leaf: usize,
    pub byte: usize,
    pub mask: u8,
}

#[derive(Debug, Clone)]
pub struct ClientNode {
    hasher: Hasher,
    id: ClientId,
    limit: Option<Amount>,
    suspended: bool,
    ptts: BTreeMap<PairKey, PeerTransactionTree>,
    balance_tree: BalanceMht,
    local_views: BTreeMap<PairKey, Vec<LocalView>>,
    report_seq: u64,
    /// Amounts at or above this travel to the Integrity Manager in full.
    critical_threshold: Option<Amount>,
    exchange: Option<Exchange>,
    tamper: Option<ArmedTamper>,
    forge: Option<Amount>,
}

impl ClientNode {
    pub fn new(hasher: Hasher, id: ClientId, limit: Option<Amount>) -> Self {
        Self::with_fanout(hasher, id, limit, DEFAULT_FANOUT).expect("default fanout is valid")
    }

    pub fn with_fanout(hasher: Hasher, id: ClientId, limit: Option<Amount>, fanout: usize) -> Result<Self, NodeError> {
        let balance_tree = BalanceMht::with_fanout(hasher.clone(), fanout)?;
        Ok(ClientNode {
            hasher,
            id,
            limit,
            suspended: false,
            ptts: BTreeMap::new(),
            balance_tree,
            local_views: BTreeMap::new(),
            report_seq: 0,
            critical_threshold: None,
            exchange: None,
            tamper: None,
            forge: None,
        })
    }

    /// The issuance desk: id 0, holding the whole supply cap from a genesis
    /// record at key (0, 0).
    pub fn treasury(hasher: Hasher, supply_cap: Amount, fanout: usize) -> Result<Self, NodeError> {
        let mut node = Self::with_fanout(hasher, ClientId::TREASURY, None, fanout)?;
        let genesis = genesis_record(&node.hasher, supply_cap);
        node.balance_tree.insert(genesis)?;
        Ok(node)
    }

    pub fn from_rebuilt(
        hasher: Hasher,
        id: ClientId,
        limit: Option<Amount>,
        rebuilt: RebuiltState,
        report_seq: u64,
    ) -> Self {
        ClientNode {
            hasher,
            id,
            limit,
            suspended: false,
            ptts: rebuilt.ptts,
            balance_tree: rebuilt.balance_tree,
            local_views: rebuilt.local_views,
            report_seq,
            critical_threshold: None,
            exchange: None,
            tamper: None,
            forge: None,
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn hasher(&self) -> &Hasher {
        &self.hasher
    }

    pub fn limit(&self) -> Option<Amount> {
        self.limit
    }

    pub fn is_suspended(&self) -> bool {
        self.suspended
    }

    pub fn set_suspended(&mut self, suspended: bool) {
        self.suspended = suspended;
    }

    pub fn set_critical_threshold(&mut self, threshold: Option<Amount>) {
        self.critical_threshold = threshold;
    }

    pub fn critical_threshold(&self) -> Option<Amount> {
        self.critical_threshold
    }

    pub fn report_seq(&self) -> u64 {
        self.report_seq
    }

    pub fn balance(&self) -> Amount {
        self.balance_tree.latest_balance()
    }

    /// Current balance tree root (MHTR).
    pub fn mhtr(&self) -> Digest {
        self.balance_tree.root()
    }

    pub fn balance_tree(&self) -> &BalanceMht {
        &self.balance_tree
    }

    pub fn ptt(&self, pair: PairKey) -> Option<&PeerTransactionTree> {
        self.ptts.get(&pair)
    }

    pub fn ptts(&self) -> &BTreeMap<PairKey, PeerTransactionTree> {
        &self.ptts
    }

    pub fn local_views(&self, pair: PairKey) -> &[LocalView] {
        self.local_views.get(&pair).map_or(&[], Vec::as_slice)
    }

    pub fn is_idle(&self) -> bool {
        self.exchange.is_none()
    }

    /// Starts (or reactivates) the tree for a newly registered peer.
    pub fn register_pair(&mut self, pair: PairKey) {
        debug_assert!(pair.contains(self.id));
        self.ptts
            .entry(pair)
            .or_insert_with(|| PeerTransactionTree::new(self.hasher.clone(), pair))
            .set_active(true);
    }

    pub fn deregister_pair(&mut self, pair: PairKey) {
        if let Some(t) = self.ptts.get_mut(&pair) {
            t.set_active(false);
        }
    }

    fn party(&self) -> PartyState {
        PartyState {
            id: self.id,
            balance: self.balance(),
            limit: self.limit,
            provenance: self.mhtr(),
            suspended: self.suspended,
        }
    }

    fn check_key(&self, timestamp: Tick, pair_seq: u64) -> Result<(), NodeError> {
        let got = RecordKey::new(timestamp, pair_seq);
        match self.balance_tree.last_key() {
            Some(last) if got <= last => Err(NodeError::StaleTimestamp { last, got }),
            _ => Ok(()),
        }
    }

    fn tree(&self, peer: ClientId) -> Result<(PairKey, &PeerTransactionTree), NodeError> {
        let pair = PairKey::new(self.id, peer).ok_or(LedgerError::SelfTransfer)?;
        let ptt = self
            .ptts
            .get(&pair)
            .ok_or(LedgerError::NotRegisteredPeers(self.id, peer))?;
        Ok((pair, ptt))
    }

    /// Starts a payment to `peer`. The node is the payer.
    pub fn initiate(
        &mut self,
        peer: ClientId,
        amount: Amount,
        timestamp: Tick,
        purpose: Purpose,
    ) -> Result<Vec<Outbound>, NodeError> {
        if self.exchange.is_some() {
            return Err(NodeError::Busy(self.id));
        }
        let (_, ptt) = self.tree(peer)?;
        self.check_key(timestamp, ptt.next_seq())?;
        let proposal = propose(&self.hasher, &self.party(), ptt, peer, amount, timestamp, purpose)?;
        self.exchange = Some(Exchange::Paying(proposal.clone()));
        Ok(vec![Outbound::Peer {
            to: peer,
            msg: PeerMessage::Propose(proposal),
        }])
    }

    /// Drops an exchange this node started, for when the peer is unreachable.
    pub fn cancel_outgoing(&mut self) -> Option<TransactionProposal> {
        match self.exchange.take() {
            Some(Exchange::Paying(p)) => Some(p),
            other => {
                self.exchange = other;
                None
            }
        }
    }

    pub fn handle(&mut self, from: ClientId, msg: PeerMessage) -> Result<Reaction, NodeError> {
        match msg {
            PeerMessage::Propose(p) => self.on_propose(from, p),
            PeerMessage::Accept { record, root } => self.on_accept(from, record, root),
            PeerMessage::Confirm { pair, pair_seq, root } => self.on_confirm(from, pair, pair_seq, root),
            PeerMessage::Abort { pair, pair_seq, .. } => {
                let mut r = Reaction::default();
                if let Some(Exchange::Receiving(p)) = &self.exchange {
                    if p.pair_key() == Some(pair) && p.pair_seq == pair_seq {
                        self.exchange = None;
                        self.ptts.get_mut(&pair).expect("staged pair").rollback_staged()?;
                        r.events.push(NodeEvent::Aborted { pair, pair_seq });
                    }
                }
                Ok(r)
            }
            PeerMessage::Reject { pair, pair_seq, reason } => {
                let mut r = Reaction::default();
                if let Some(Exchange::Paying(p)) = &self.exchange {
                    if p.pair_key() == Some(pair) && p.pair_seq == pair_seq {
                        self.exchange = None;
                        r.events.push(NodeEvent::Rejected { pair, pair_seq, reason });
                    }
                }
                Ok(r)
            }
        }
    }

    fn on_propose(&mut self, from: ClientId, p: TransactionProposal) -> Result<Reaction, NodeError> {
        let pair = p.pair_key().ok_or(LedgerError::SelfTransfer)?;
        let reject = |reason: String| Reaction {
            out: vec![Outbound::Peer {
                to: from,
                msg: PeerMessage::Reject {
                    pair,
                    pair_seq: p.pair_seq,
                    reason,
                },
            }],
            events: Vec::new(),
        };
        if p.payer_id != from {
            return Ok(reject(format!("proposal sent by {from} for payer {}", p.payer_id)));
        }
        if self.exchange.is_some() {
            return Ok(reject(NodeError::Busy(self.id).to_string()));
        }
        let record = match self
            .tree(from)
            .and_then(|(_, ptt)| {
                self.check_key(p.timestamp, p.pair_seq)?;
                Ok(accept(&self.hasher, &p, &self.party(), ptt)?)
            }) {
            Ok(r) => r,
            Err(e) => return Ok(reject(e.to_string())),
        };
        let root = self.ptts.get_mut(&pair).expect("checked above").stage(&record)?;
        self.exchange = Some(Exchange::Receiving(p));
        Ok(Reaction {
            out: vec![Outbound::Peer {
                to: from,
                msg: PeerMessage::Accept { record, root },
            }],
            events: Vec::new(),
        })
    }

    fn on_accept(&mut self, from: ClientId, record: TransactionPairRecord, payee_root: Digest) -> Result<Reaction, NodeError> {
        let Some(Exchange::Paying(p)) = &self.exchange else {
            return Ok(Reaction::default());
        };
        if p.payee_id != from || p.pair_seq != record.pair_seq {
            return Ok(Reaction::default());
        }
        let p = p.clone();
        let pair = p.pair_key().expect("proposal pair");
        let seq = p.pair_seq;
        self.exchange = None;
        if !p.matches(&record) {
            return Ok(Reaction {
                out: vec![Outbound::Peer {
                    to: from,
                    msg: PeerMessage::Abort {
                        pair,
                        pair_seq: seq,
                        root: Digest::default(),
                    },
                }],
                events: vec![NodeEvent::Aborted { pair, pair_seq: seq }],
            });
        }
        let ptt = self.ptts.get_mut(&pair).expect("proposal pair registered");
        let own_root = ptt.stage(&record)?;
        if own_root != payee_root {
            ptt.rollback_staged()?;
            return Ok(Reaction {
                out: vec![
                    Outbound::Peer {
                        to: from,
                        msg: PeerMessage::Abort {
                            pair,
                            pair_seq: seq,
                            root: own_root,
                        },
                    },
                    Outbound::CommitFailure(CommitFailureNotice {
                        reporter: self.id,
                        pair,
                        pair_seq: seq,
                        own_root,
                        peer_root: payee_root,
                        timestamp: record.timestamp,
                    }),
                ],
                events: vec![NodeEvent::Aborted { pair, pair_seq: seq }],
            });
        }
        ptt.finalize_staged()?;
        let mut out = vec![Outbound::Peer {
            to: from,
            msg: PeerMessage::Confirm {
                pair,
                pair_seq: seq,
                root: own_root,
            },
        }];
        out.extend(self.apply_commit(&record, own_root, p.purpose)?);
        Ok(Reaction {
            out,
            events: vec![NodeEvent::Committed {
                pair,
                pair_seq: seq,
                root: own_root,
            }],
        })
    }

    fn on_confirm(&mut self, from: ClientId, pair: PairKey, seq: u64, payer_root: Digest) -> Result<Reaction, NodeError> {
        let Some(Exchange::Receiving(p)) = &self.exchange else {
            return Ok(Reaction::default());
        };
        if p.payer_id != from || p.pair_seq != seq || p.pair_key() != Some(pair) {
            return Ok(Reaction::default());
        }
        let p = p.clone();
        self.exchange = None;
        let ptt = self.ptts.get_mut(&pair).expect("staged pair");
        let own_root = ptt.root().expect("staged leaf present");
        let record = TransactionPairRecord::decode(ptt.leaves().last().expect("staged leaf"))
            .map_err(LedgerError::from)?;
        if own_root != payer_root {
            ptt.rollback_staged()?;
            return Ok(Reaction {
                out: vec![Outbound::CommitFailure(CommitFailureNotice {
                    reporter: self.id,
                    pair,
                    pair_seq: seq,
                    own_root,
                    peer_root: payer_root,
                    timestamp: record.timestamp,
                })],
                events: vec![NodeEvent::Aborted { pair, pair_seq: seq }],
            });
        }
        ptt.finalize_staged()?;
        let out = self.apply_commit(&record, own_root, p.purpose)?;
        Ok(Reaction {
            out,
            events: vec![NodeEvent::Committed {
                pair,
                pair_seq: seq,
                root: own_root,
            }],
        })
    }

    /// Balance record, local view and the two manager reports for a commit.
    fn apply_commit(&mut self, record: &TransactionPairRecord, root: Digest, purpose: Purpose) -> Result<Vec<Outbound>, NodeError> {
        let pair = record.pair_key().expect("committed record has a pair");
        let peer = pair.other(self.id).expect("own pair");
        let prior_balance = self.balance();
        let prior_mhtr = self.mhtr();
        let delta = record.delta_for(self.id);
        let new_balance = prior_balance + delta;
        let mhtr = self.balance_tree.insert(BalanceChangeRecord {
            pair_seq: record.pair_seq,
            timestamp: record.timestamp,
            peer_id: peer,
            delta,
            new_balance,
            causing_pttr: root,
        })?;
        if let Some(view) = LocalView::new(record.clone(), self.id, prior_balance) {
            self.local_views.entry(pair).or_default().push(view);
        }

        if let Some(t) = self.tamper.filter(|t| t.pair == pair) {
            self.tamper = None;
            self.ptts
                .get_mut(&pair)
                .expect("committed pair")
                .tamper_leaf(t.leaf, t.byte, t.mask)?;
        }
        let ptt = &self.ptts[&pair];
        let bytes = record.encode();
        let critical = self.critical_threshold.is_some_and(|t| record.amount >= t);
        let report = TransactionReport {
            reporter: self.id,
            pair,
            pair_seq: record.pair_seq,
            epoch: ptt.epoch(),
            first_seq: ptt.first_seq(),
            leaf_count: ptt.len() as u64,
            pttr: ptt.root().expect("committed tree has a root"),
            record_digest: self.hasher.hash(&[&bytes]),
            timestamp: record.timestamp,
            record_bytes: critical.then_some(bytes),
        };

        let extra = self.forge.take().unwrap_or(0);
        self.report_seq += 1;
        let peer_provenance = if record.payer_id == self.id {
            record.payee_provenance
        } else {
            record.payer_provenance
        };
        let balance = BalanceReport {
            client: self.id,
            report_seq: self.report_seq,
            pair,
            pair_seq: record.pair_seq,
            delta: delta + extra,
            new_balance: new_balance + extra,
            mhtr,
            prior_mhtr,
            peer_provenance,
            timestamp: record.timestamp,
            purpose,
        };
        Ok(vec![Outbound::Report(report), Outbound::Balance(balance)])
    }

    /// Arms a leaf flip that fires after the next commit on `t.pair`, before
    /// its report is built.
    pub fn arm_tamper(&mut self, t: ArmedTamper) {
        self.tamper = Some(t);
    }

    /// Inflates the next balance report by `extra`.
    pub fn arm_forge(&mut self, extra: Amount) {
        self.forge = Some(extra);
    }

    /// Rolls the balance tree back to just before its latest record, as a
    /// client restoring an old copy of its state to spend twice.
    pub fn fork_balance_state(&mut self) -> Result<(), NodeError> {
        let mut records: Vec<BalanceChangeRecord> = self.balance_tree.records().cloned().collect();
        records.pop();
        let mut tree = BalanceMht::with_fanout(self.hasher.clone(), self.balance_tree.fanout())?;
        for r in records {
            tree.insert(r)?;
        }
        self.balance_tree = tree;
        Ok(())
    }

    /// Flips a stored leaf right away.
    pub fn tamper_leaf(&mut self, pair: PairKey, leaf: usize, byte: usize, mask: u8) -> Result<(), NodeError> {
        let ptt = self
            .ptts
            .get_mut(&pair)
            .ok_or(LedgerError::NotRegisteredPeers(pair.lo(), pair.hi()))?;
        ptt.tamper_leaf(leaf, byte, mask)?;
        Ok(())
    }

    pub fn sign_epoch(&self, pair: PairKey, keys: &Keyring) -> Result<Signature, NodeError> {
        let root = self
            .ptts
            .get(&pair)
            .and_then(PeerTransactionTree::root)
            .ok_or(LedgerError::EmptyEpoch(pair))?;
        Ok(keys.sign_root(&self.id.signer_label(), &root)?)
    }

    pub fn reset_epoch(&mut self, pair: PairKey, sigs: &[Signature], keys: &KeyDirectory) -> Result<Digest, NodeError> {
        let ptt = self
            .ptts
            .get_mut(&pair)
            .ok_or(LedgerError::NotRegisteredPeers(pair.lo(), pair.hi()))?;
        Ok(ptt.reset_epoch(sigs, keys)?)
    }

    /// Net issuance held outside any pair: the genesis supply for the desk.
    fn opening(&self) -> Amount {
        if self.id.is_treasury() {
            self.balance_tree.records().next().map_or(0, |r| r.new_balance)
        } else {
            0
        }
    }

    /// Checks the balance identity and that every balance record names the
    /// pair root right after its commit.
    pub fn check_consistency(&self) -> Result<(), String> {
        let net: Amount = self.ptts.values().map(|t| t.lifetime_net_position(self.id)).sum();
        if self.balance() != self.opening() + net {
            return Err(format!(
                "balance {} differs from opening {} plus net position {net}",
                self.balance(),
                self.opening()
            ));
        }
        for r in self.balance_tree.records() {
            if self.id.is_treasury() && r.key() == RecordKey::MIN {
                continue;
            }
            let Some(pair) = PairKey::new(self.id, r.peer_id) else {
                return Err(format!("record {} names itself as peer", r.key()));
            };
            let root = self
                .ptts
                .get(&pair)
                .ok_or_else(|| format!("record {} names unknown pair {pair}", r.key()))?
                .root_at(r.pair_seq)
                .map_err(|e| e.to_string())?;
            if root != r.causing_pttr {
                return Err(format!("record {} does not match the root of {pair}#{}", r.key(), r.pair_seq));
            }
        }
        Ok(())
    }
}

pub(crate) fn genesis_record(hasher: &Hasher, supply_cap: Amount) -> BalanceChangeRecord {
    BalanceChangeRecord {
        pair_seq: 0,
        timestamp: 0,
        peer_id: ClientId::TREASURY,
        delta: supply_cap,
        new_balance: supply_cap,
        causing_pttr: hasher.marker(tag::TREASURY),
    }
}
