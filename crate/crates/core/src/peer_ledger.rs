//! Per-pair transaction ledger.
//!
//! Every transfer is one canonical credit-debit pair record. Both peers
//! append the same record bytes to their copy of the pair's Peer Transaction
//! Tree (PTT); a transaction counts as committed only when both copies end up
//! with the same root.

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Reader};
use crate::hash::{Digest, HashError, Hasher};
use crate::merkle::{InclusionProof, MerkleError, MerkleTree};
use crate::signature::{KeyDirectory, Signature};
use crate::types::{Amount, ClientId, PairKey, Tick};

/// Encoded size of a [`TransactionPairRecord`].
pub const RECORD_LEN: usize = 5 * 8 + 6 * 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("amount must be positive, got {0}")]
    NonPositiveAmount(Amount),
    #[error("payer and payee are the same client")]
    SelfTransfer,
    #[error("insufficient balance: {balance} available, {amount} requested")]
    InsufficientBalance { balance: Amount, amount: Amount },
    #[error("amount {amount} exceeds transaction limit {limit}")]
    LimitExceeded { limit: Amount, amount: Amount },
    #[error("clients {0} and {1} are not registered peers")]
    NotRegisteredPeers(ClientId, ClientId),
    #[error("client {0} is suspended")]
    PeerSuspended(ClientId),
    #[error("proposal addressed to {expected} delivered to {got}")]
    WrongAddressee { expected: ClientId, got: ClientId },
    #[error("pair {pair} already holds sequence {seq}: replayed record")]
    Replay { pair: PairKey, seq: u64 },
    #[error("expected pair sequence {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("a transaction is already staged on pair {0}")]
    StagedLeafPending(PairKey),
    #[error("no staged transaction on pair {0}")]
    NoStagedLeaf(PairKey),
    #[error("record does not belong to pair {0}")]
    ForeignRecord(PairKey),
    #[error("missing counter-signature from `{0}`")]
    MissingCounterSignature(String),
    #[error("epoch of pair {0} holds no transactions")]
    EmptyEpoch(PairKey),
    #[error("archived epoch {0} root does not match its leaves")]
    ArchivedRootMismatch(u64),
    #[error("leaf {index} out of range ({len} leaves)")]
    LeafOutOfRange { index: usize, len: usize },
    #[error("malformed record: {0}")]
    MalformedRecord(#[from] DecodeError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
}

/// The canonical credit-debit pair. Identical bytes at both peers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionPairRecord {
    pub pair_seq: u64,
    pub timestamp: Tick,
    pub payer_id: ClientId,
    pub payee_id: ClientId,
    pub amount: Amount,
    pub payer_prior_commit: Digest,
    pub payer_new_commit: Digest,
    pub payee_prior_commit: Digest,
    pub payee_new_commit: Digest,
    pub payer_provenance: Digest,
    pub payee_provenance: Digest,
}

impl TransactionPairRecord {
    /// `pair_seq || timestamp || payer || payee || amount` (8 bytes each,
    /// big-endian) followed by the six digests in field order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_LEN);
        out.extend_from_slice(&self.pair_seq.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.payer_id.to_be_bytes());
        out.extend_from_slice(&self.payee_id.to_be_bytes());
        out.extend_from_slice(&self.amount.to_be_bytes());
        for d in [
            &self.payer_prior_commit,
            &self.payer_new_commit,
            &self.payee_prior_commit,
            &self.payee_new_commit,
            &self.payer_provenance,
            &self.payee_provenance,
        ] {
            out.extend_from_slice(d.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let rec = TransactionPairRecord {
            pair_seq: r.u64()?,
            timestamp: r.u64()?,
            payer_id: ClientId(r.u64()?),
            payee_id: ClientId(r.u64()?),
            amount: r.i64()?,
            payer_prior_commit: r.digest()?,
            payer_new_commit: r.digest()?,
            payee_prior_commit: r.digest()?,
            payee_new_commit: r.digest()?,
            payer_provenance: r.digest()?,
            payee_provenance: r.digest()?,
        };
        r.finish()?;
        Ok(rec)
    }

    pub fn pair_key(&self) -> Option<PairKey> {
        PairKey::new(self.payer_id, self.payee_id)
    }

    /// Signed balance effect on `id`: `-amount` for the payer, `+amount` for
    /// the payee, zero for anyone else.
    pub fn delta_for(&self, id: ClientId) -> Amount {
        if id == self.payer_id {
            -self.amount
        } else if id == self.payee_id {
            self.amount
        } else {
            0
        }
    }

    pub fn leg_of(&self, id: ClientId) -> Option<Leg> {
        if id == self.payer_id {
            Some(Leg::Debit)
        } else if id == self.payee_id {
            Some(Leg::Credit)
        } else {
            None
        }
    }
}

/// Debit legs carry suffix `.1`, credit legs `.2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Leg {
    Debit,
    Credit,
}

pub fn leg_id(pair_seq: u64, leg: Leg) -> String {
    match leg {
        Leg::Debit => format!("{pair_seq}.1"),
        Leg::Credit => format!("{pair_seq}.2"),
    }
}

/// One peer's private view of a committed pair record, with plaintext
/// balances that never enter the shared leaf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalView {
    pub pair_seq: u64,
    pub leg_id: String,
    pub own_prior_balance: Amount,
    pub own_new_balance: Amount,
    pub record: TransactionPairRecord,
}

impl LocalView {
    /// Returns `None` if `own` is not a party to `record`.
    pub fn new(record: TransactionPairRecord, own: ClientId, own_prior_balance: Amount) -> Option<Self> {
        let leg = record.leg_of(own)?;
        Some(LocalView {
            pair_seq: record.pair_seq,
            leg_id: leg_id(record.pair_seq, leg),
            own_prior_balance,
            own_new_balance: own_prior_balance + record.delta_for(own),
            record,
        })
    }
}

/// Why a transaction happens; carried beside the record, never inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Purpose {
    Transfer,
    Issuance,
    Redemption,
    Reparation { original_seq: u64 },
}

impl Purpose {
    /// Mandated transactions are ordered by the Currency Manager and bypass
    /// the suspension and limit checks.
    pub fn is_mandated(self) -> bool {
        matches!(self, Purpose::Issuance | Purpose::Reparation { .. })
    }
}

/// What a peer knows about itself when proposing or accepting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartyState {
    pub id: ClientId,
    pub balance: Amount,
    pub limit: Option<Amount>,
    pub provenance: Digest,
    pub suspended: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionProposal {
    pub pair_seq: u64,
    pub timestamp: Tick,
    pub payer_id: ClientId,
    pub payee_id: ClientId,
    pub amount: Amount,
    pub payer_prior_commit: Digest,
    pub payer_new_commit: Digest,
    pub payer_provenance: Digest,
    pub purpose: Purpose,
}

impl TransactionProposal {
    pub fn pair_key(&self) -> Option<PairKey> {
        PairKey::new(self.payer_id, self.payee_id)
    }

    /// True if `record` is the completion of this proposal.
    pub fn matches(&self, record: &TransactionPairRecord) -> bool {
        self.pair_seq == record.pair_seq
            && self.timestamp == record.timestamp
            && self.payer_id == record.payer_id
            && self.payee_id == record.payee_id
            && self.amount == record.amount
            && self.payer_prior_commit == record.payer_prior_commit
            && self.payer_new_commit == record.payer_new_commit
            && self.payer_provenance == record.payer_provenance
    }
}

pub fn propose(
    hasher: &Hasher,
    payer: &PartyState,
    ptt: &PeerTransactionTree,
    payee_id: ClientId,
    amount: Amount,
    timestamp: Tick,
    purpose: Purpose,
) -> Result<TransactionProposal, LedgerError> {
    if amount <= 0 {
        return Err(LedgerError::NonPositiveAmount(amount));
    }
    let pair = PairKey::new(payer.id, payee_id).ok_or(LedgerError::SelfTransfer)?;
    if payer.suspended && !purpose.is_mandated() {
        return Err(LedgerError::PeerSuspended(payer.id));
    }
    if ptt.pair() != pair || !ptt.is_active() {
        return Err(LedgerError::NotRegisteredPeers(payer.id, payee_id));
    }
    if amount > payer.balance {
        return Err(LedgerError::InsufficientBalance {
            balance: payer.balance,
            amount,
        });
    }
    if let Some(limit) = payer.limit {
        if amount > limit && !purpose.is_mandated() {
            return Err(LedgerError::LimitExceeded { limit, amount });
        }
    }
    if ptt.has_staged() {
        return Err(LedgerError::StagedLeafPending(pair));
    }
    let pair_seq = ptt.next_seq();
    Ok(TransactionProposal {
        pair_seq,
        timestamp,
        payer_id: payer.id,
        payee_id,
        amount,
        payer_prior_commit: hasher.commit_balance(payer.id, pair_seq, payer.balance)?,
        payer_new_commit: hasher.commit_balance(payer.id, pair_seq, payer.balance - amount)?,
        payer_provenance: payer.provenance,
        purpose,
    })
}

pub fn accept(
    hasher: &Hasher,
    proposal: &TransactionProposal,
    payee: &PartyState,
    ptt: &PeerTransactionTree,
) -> Result<TransactionPairRecord, LedgerError> {
    if proposal.payee_id != payee.id {
        return Err(LedgerError::WrongAddressee {
            expected: proposal.payee_id,
            got: payee.id,
        });
    }
    if proposal.amount <= 0 {
        return Err(LedgerError::NonPositiveAmount(proposal.amount));
    }
    let pair = proposal.pair_key().ok_or(LedgerError::SelfTransfer)?;
    if payee.suspended && !proposal.purpose.is_mandated() {
        return Err(LedgerError::PeerSuspended(payee.id));
    }
    if ptt.pair() != pair || !ptt.is_active() {
        return Err(LedgerError::NotRegisteredPeers(proposal.payer_id, payee.id));
    }
    if ptt.has_staged() {
        return Err(LedgerError::StagedLeafPending(pair));
    }
    ptt.check_next_seq(proposal.pair_seq)?;
    let seq = proposal.pair_seq;
    Ok(TransactionPairRecord {
        pair_seq: seq,
        timestamp: proposal.timestamp,
        payer_id: proposal.payer_id,
        payee_id: proposal.payee_id,
        amount: proposal.amount,
        payer_prior_commit: proposal.payer_prior_commit,
        payer_new_commit: proposal.payer_new_commit,
        payee_prior_commit: hasher.commit_balance(payee.id, seq, payee.balance)?,
        payee_new_commit: hasher.commit_balance(payee.id, seq, payee.balance + proposal.amount)?,
        payer_provenance: proposal.payer_provenance,
        payee_provenance: payee.provenance,
    })
}

/// A closed epoch whose leaves were moved out of the live tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchivedEpoch {
    pub epoch: u64,
    pub root: Digest,
    pub first_seq: u64,
    pub leaves: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed(Digest),
    RootMismatch { payer_root: Digest, payee_root: Digest },
}

/// One peer's copy of a pair's transaction tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerTransactionTree {
    #[serde(skip)]
    hasher: Hasher,
    pair: PairKey,
    epoch: u64,
    first_seq: u64,
    leaves: Vec<Vec<u8>>,
    #[serde(skip)]
    tree: Option<MerkleTree>,
    staged: bool,
    archived: Vec<ArchivedEpoch>,
    active: bool,
}

impl PartialEq for PeerTransactionTree {
    fn eq(&self, other: &Self) -> bool {
        self.pair == other.pair
            && self.epoch == other.epoch
            && self.first_seq == other.first_seq
            && self.leaves == other.leaves
            && self.staged == other.staged
            && self.archived == other.archived
            && self.active == other.active
    }
}

impl PeerTransactionTree {
    /// Fresh tree for a registered pair. Sequence numbers start at 1.
    pub fn new(hasher: Hasher, pair: PairKey) -> Self {
        PeerTransactionTree {
            hasher,
            pair,
            epoch: 0,
            first_seq: 1,
            leaves: Vec::new(),
            tree: None,
            staged: false,
            archived: Vec::new(),
            active: true,
        }
    }

    /// Rebuilds the cached tree after deserialization or disclosure, checking
    /// every archived root against its leaves.
    pub fn rehydrate(mut self, hasher: Hasher) -> Result<Self, LedgerError> {
        self.hasher = hasher;
        for a in &self.archived {
            let tree = MerkleTree::build(&self.hasher, &a.leaves)?;
            if tree.root() != a.root {
                return Err(LedgerError::ArchivedRootMismatch(a.epoch));
            }
        }
        self.tree = if self.leaves.is_empty() {
            None
        } else {
            Some(MerkleTree::build(&self.hasher, &self.leaves)?)
        };
        Ok(self)
    }

    /// Reassembles a tree from its persisted parts and checks every root.
    pub fn from_parts(
        hasher: Hasher,
        pair: PairKey,
        epoch: u64,
        first_seq: u64,
        active: bool,
        archived: Vec<ArchivedEpoch>,
        leaves: Vec<Vec<u8>>,
    ) -> Result<Self, LedgerError> {
        PeerTransactionTree {
            hasher: hasher.clone(),
            pair,
            epoch,
            first_seq,
            leaves,
            tree: None,
            staged: false,
            archived,
            active,
        }
        .rehydrate(hasher)
    }

    pub fn pair(&self) -> PairKey {
        self.pair
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn first_seq(&self) -> u64 {
        self.first_seq
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn set_active(&mut self, active: bool) {
        self.active = active;
    }

    pub fn has_staged(&self) -> bool {
        self.staged
    }

    /// Number of committed leaves in the current epoch.
    pub fn len(&self) -> usize {
        self.leaves.len() - usize::from(self.staged)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_seq(&self) -> u64 {
        self.first_seq + self.leaves.len() as u64
    }

    /// Sequence number of the newest committed leaf.
    pub fn last_seq(&self) -> Option<u64> {
        (!self.is_empty()).then(|| self.first_seq + self.len() as u64 - 1)
    }

    pub fn root(&self) -> Option<Digest> {
        self.tree.as_ref().map(MerkleTree::root)
    }

    pub fn leaves(&self) -> &[Vec<u8>] {
        &self.leaves
    }

    pub fn archived(&self) -> &[ArchivedEpoch] {
        &self.archived
    }

    pub fn archived_roots(&self) -> Vec<(u64, Digest)> {
        self.archived.iter().map(|a| (a.epoch, a.root)).collect()
    }

    /// Decoded current-epoch records. Tampered leaves still decode since the
    /// layout is fixed-width.
    pub fn records(&self) -> impl Iterator<Item = TransactionPairRecord> + '_ {
        self.leaves
            .iter()
            .filter_map(|l| TransactionPairRecord::decode(l).ok())
    }

    /// Records of every epoch, oldest first.
    pub fn all_records(&self) -> Vec<TransactionPairRecord> {
        self.archived
            .iter()
            .flat_map(|a| a.leaves.iter())
            .chain(self.leaves.iter())
            .filter_map(|l| TransactionPairRecord::decode(l).ok())
            .collect()
    }

    fn check_next_seq(&self, seq: u64) -> Result<(), LedgerError> {
        let expected = self.next_seq();
        if seq < expected {
            Err(LedgerError::Replay {
                pair: self.pair,
                seq,
            })
        } else if seq > expected {
            Err(LedgerError::SequenceGap { expected, got: seq })
        } else {
            Ok(())
        }
    }

    /// Tentatively appends `record` and returns the resulting root.
    pub fn stage(&mut self, record: &TransactionPairRecord) -> Result<Digest, LedgerError> {
        if record.pair_key() != Some(self.pair) {
            return Err(LedgerError::ForeignRecord(self.pair));
        }
        if self.staged {
            return Err(LedgerError::StagedLeafPending(self.pair));
        }
        self.check_next_seq(record.pair_seq)?;
        let bytes = record.encode();
        let leaf = self.hasher.hash_leaf(&bytes)?;
        match &mut self.tree {
            Some(t) => t.push_digest(&self.hasher, leaf),
            None => self.tree = Some(MerkleTree::from_leaf_digests(&self.hasher, vec![leaf])?),
        }
        self.leaves.push(bytes);
        self.staged = true;
        Ok(self.root().expect("tree present after stage"))
    }

    pub fn rollback_staged(&mut self) -> Result<(), LedgerError> {
        if !self.staged {
            return Err(LedgerError::NoStagedLeaf(self.pair));
        }
        self.leaves.pop();
        self.staged = false;
        if self.leaves.is_empty() {
            self.tree = None;
        } else if let Some(t) = &mut self.tree {
            t.truncate(&self.hasher, self.leaves.len())?;
        }
        Ok(())
    }

    pub fn finalize_staged(&mut self) -> Result<Digest, LedgerError> {
        if !self.staged {
            return Err(LedgerError::NoStagedLeaf(self.pair));
        }
        self.staged = false;
        Ok(self.root().expect("tree present after stage"))
    }

    /// Appends and finalizes in one step, for rebuilding from trusted data.
    pub fn append_committed(&mut self, record: &TransactionPairRecord) -> Result<Digest, LedgerError> {
        self.stage(record)?;
        self.finalize_staged()
    }

    /// XORs `mask` into one byte of a stored leaf and rehashes. Fault
    /// injection only.
    pub fn tamper_leaf(&mut self, index: usize, byte: usize, mask: u8) -> Result<(), LedgerError> {
        let len = self.leaves.len();
        let leaf = self
            .leaves
            .get_mut(index)
            .ok_or(LedgerError::LeafOutOfRange { index, len })?;
        let b = byte % leaf.len();
        leaf[b] ^= if mask == 0 { 1 } else { mask };
        self.tree = Some(MerkleTree::build(&self.hasher, &self.leaves)?);
        Ok(())
    }

    /// Tree over the first `len` leaves of the current epoch.
    pub fn prefix_tree(&self, len: usize) -> Result<MerkleTree, LedgerError> {
        if len > self.len() {
            return Err(LedgerError::LeafOutOfRange {
                index: len,
                len: self.len(),
            });
        }
        Ok(MerkleTree::build(&self.hasher, &self.leaves[..len])?)
    }

    /// Root right after `seq` was committed, in whichever epoch holds it.
    pub fn root_at(&self, seq: u64) -> Result<Digest, LedgerError> {
        let out_of_range = LedgerError::LeafOutOfRange {
            index: seq as usize,
            len: self.len(),
        };
        if seq >= self.first_seq {
            let len = (seq - self.first_seq + 1) as usize;
            if len > self.len() {
                return Err(out_of_range);
            }
            return Ok(self.prefix_tree(len)?.root());
        }
        let a = self
            .archived
            .iter()
            .find(|a| a.first_seq <= seq && seq < a.first_seq + a.leaves.len() as u64)
            .ok_or(out_of_range)?;
        let len = (seq - a.first_seq + 1) as usize;
        Ok(MerkleTree::build(&self.hasher, &a.leaves[..len])?.root())
    }

    /// Proof for `seq` against the tree of the first `as_of_len` leaves.
    pub fn prove(&self, seq: u64, as_of_len: usize) -> Result<InclusionProof, LedgerError> {
        let index = seq
            .checked_sub(self.first_seq)
            .map(|i| i as usize)
            .ok_or(LedgerError::LeafOutOfRange {
                index: 0,
                len: self.len(),
            })?;
        Ok(self.prefix_tree(as_of_len)?.prove(index)?)
    }

    /// Net credit (+) or debit (-) of `self_id` over the current epoch.
    pub fn net_position(&self, self_id: ClientId) -> Amount {
        self.records().map(|r| r.delta_for(self_id)).sum()
    }

    /// Net position including every archived epoch.
    pub fn lifetime_net_position(&self, self_id: ClientId) -> Amount {
        self.all_records().iter().map(|r| r.delta_for(self_id)).sum()
    }

    /// Archives the current epoch once both peers have signed its root.
    /// Sequence numbers keep counting in the new epoch.
    pub fn reset_epoch(
        &mut self,
        signatures: &[Signature],
        keys: &KeyDirectory,
    ) -> Result<Digest, LedgerError> {
        if self.staged {
            return Err(LedgerError::StagedLeafPending(self.pair));
        }
        let root = self.root().ok_or(LedgerError::EmptyEpoch(self.pair))?;
        for signer in [self.pair.lo().signer_label(), self.pair.hi().signer_label()] {
            if !signatures.iter().any(|s| keys.verify_from(&signer, &root, s)) {
                return Err(LedgerError::MissingCounterSignature(signer));
            }
        }
        let leaves = std::mem::take(&mut self.leaves);
        self.archived.push(ArchivedEpoch {
            epoch: self.epoch,
            root,
            first_seq: self.first_seq,
            leaves,
        });
        self.first_seq += self.archived.last().map_or(0, |a| a.leaves.len() as u64);
        self.epoch += 1;
        self.tree = None;
        Ok(root)
    }
}

/// Runs the two-sided commit: both copies stage the record and the leaf is
/// kept only if the roots agree. On mismatch both copies are rolled back.
pub fn commit(
    payer_ptt: &mut PeerTransactionTree,
    payee_ptt: &mut PeerTransactionTree,
    record: &TransactionPairRecord,
) -> Result<CommitOutcome, LedgerError> {
    let payer_root = payer_ptt.stage(record)?;
    let payee_root = match payee_ptt.stage(record) {
        Ok(r) => r,
        Err(e) => {
            payer_ptt.rollback_staged()?;
            return Err(e);
        }
    };
    if payer_root == payee_root {
        payer_ptt.finalize_staged()?;
        payee_ptt.finalize_staged()?;
        Ok(CommitOutcome::Committed(payer_root))
    } else {
        payer_ptt.rollback_staged()?;
        payee_ptt.rollback_staged()?;
        Ok(CommitOutcome::RootMismatch {
            payer_root,
            payee_root,
        })
    }
}

/// Net position by linear scan over decoded leaves.
pub fn net_position(ptt: &PeerTransactionTree, self_id: ClientId) -> Amount {
    ptt.net_position(self_id)
}
