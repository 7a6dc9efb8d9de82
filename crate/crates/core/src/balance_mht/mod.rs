//! Per-client balance history as an authenticated B+ tree.
//!
//! Records live only in leaves, leaves are chained left to right, and every
//! node caches a hash over its contents. The root hash (MHTR) is the value a
//! client reports to the Currency Manager as its balance commitment. Keys are
//! append-only, so inserts always land in the rightmost leaf.

mod range;
mod snapshot;

pub use range::{check_range, verify_range, RangeCheck, RangeVo, VoEntry, VoNode};
pub use snapshot::SnapshotError;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Reader};
use crate::hash::{tag, Digest, Hasher};
use crate::types::{Amount, ClientId, Tick};

pub const DEFAULT_FANOUT: usize = 8;
pub const MIN_FANOUT: usize = 3;
pub const MAX_FANOUT: usize = 64;

/// Encoded size of a [`BalanceChangeRecord`].
pub const RECORD_LEN: usize = 5 * 8 + 32;
/// Encoded size of a [`RecordKey`].
pub const KEY_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BalanceTreeError {
    #[error("key {got} does not follow the current maximum {last}")]
    NonMonotonicKey { last: RecordKey, got: RecordKey },
    #[error("balance {0} is negative")]
    NegativeBalance(Amount),
    #[error("new balance {got} does not equal previous balance plus delta ({expected})")]
    BrokenRecurrence { expected: Amount, got: Amount },
    #[error("range start {lo} is after range end {hi}")]
    InvertedRange { lo: RecordKey, hi: RecordKey },
    #[error("fanout {0} outside {MIN_FANOUT}..={MAX_FANOUT}")]
    InvalidFanout(usize),
}

/// Ordering key: timestamp first, pair sequence to separate same-tick entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct RecordKey {
    pub timestamp: Tick,
    pub pair_seq: u64,
}

impl RecordKey {
    pub const MIN: RecordKey = RecordKey {
        timestamp: 0,
        pair_seq: 0,
    };
    pub const MAX: RecordKey = RecordKey {
        timestamp: Tick::MAX,
        pair_seq: u64::MAX,
    };

    pub fn new(timestamp: Tick, pair_seq: u64) -> Self {
        RecordKey {
            timestamp,
            pair_seq,
        }
    }

    pub fn to_bytes(self) -> [u8; KEY_LEN] {
        let mut out = [0u8; KEY_LEN];
        out[..8].copy_from_slice(&self.timestamp.to_be_bytes());
        out[8..].copy_from_slice(&self.pair_seq.to_be_bytes());
        out
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(RecordKey {
            timestamp: r.u64()?,
            pair_seq: r.u64()?,
        })
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.timestamp, self.pair_seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceChangeRecord {
    pub pair_seq: u64,
    pub timestamp: Tick,
    pub peer_id: ClientId,
    pub delta: Amount,
    pub new_balance: Amount,
    /// Root of the pair's transaction tree right after the causing commit.
    pub causing_pttr: Digest,
}

impl BalanceChangeRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.timestamp, self.pair_seq)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_LEN);
        out.extend_from_slice(&self.pair_seq.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.peer_id.to_be_bytes());
        out.extend_from_slice(&self.delta.to_be_bytes());
        out.extend_from_slice(&self.new_balance.to_be_bytes());
        out.extend_from_slice(self.causing_pttr.as_bytes());
        out
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(BalanceChangeRecord {
            pair_seq: r.u64()?,
            timestamp: r.u64()?,
            peer_id: ClientId(r.u64()?),
            delta: r.i64()?,
            new_balance: r.i64()?,
            causing_pttr: r.digest()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let rec = Self::read(&mut r)?;
        r.finish()?;
        Ok(rec)
    }

    pub fn hash(&self, hasher: &Hasher) -> Digest {
        hasher.tagged(tag::LEAF, &[&self.encode()])
    }
}

/// Hash of a leaf node from its records' hashes.
pub fn leaf_node_hash(hasher: &Hasher, record_hashes: &[Digest]) -> Digest {
    let mut chunks: Vec<&[u8]> = Vec::with_capacity(record_hashes.len());
    chunks.extend(record_hashes.iter().map(|d| d.as_bytes().as_slice()));
    hasher.tagged(tag::MHT_LEAF, &chunks)
}

/// Hash of an internal node: its separator keys followed by child hashes.
pub fn internal_node_hash(hasher: &Hasher, keys: &[RecordKey], children: &[Digest]) -> Digest {
    let key_bytes: Vec<[u8; KEY_LEN]> = keys.iter().map(|k| k.to_bytes()).collect();
    let mut chunks: Vec<&[u8]> = Vec::with_capacity(keys.len() + children.len());
    chunks.extend(key_bytes.iter().map(|k| k.as_slice()));
    chunks.extend(children.iter().map(|d| d.as_bytes().as_slice()));
    hasher.tagged(tag::MHT_INTERNAL, &chunks)
}

pub fn empty_root(hasher: &Hasher) -> Digest {
    hasher.marker(tag::EMPTY_MHT)
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        records: Vec<BalanceChangeRecord>,
        next: Option<usize>,
        hash: Digest,
    },
    Internal {
        keys: Vec<RecordKey>,
        children: Vec<usize>,
        hash: Digest,
    },
}

impl Node {
    fn hash(&self) -> Digest {
        match self {
            Node::Leaf { hash, .. } | Node::Internal { hash, .. } => *hash,
        }
    }

    fn first_key(&self, nodes: &[Node]) -> RecordKey {
        match self {
            Node::Leaf { records, .. } => records[0].key(),
            Node::Internal { children, .. } => nodes[children[0]].first_key(nodes),
        }
    }
}

/// Owned, read-only copy of a node and its subtree with cached hashes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeView {
    Leaf {
        records: Vec<BalanceChangeRecord>,
        hash: Digest,
    },
    Internal {
        keys: Vec<RecordKey>,
        children: Vec<NodeView>,
        hash: Digest,
    },
}

/// Cloning produces a frozen snapshot that readers can query while the
/// original keeps accepting inserts.
#[derive(Debug, Clone)]
pub struct BalanceMht {
    hasher: Hasher,
    fanout: usize,
    nodes: Vec<Node>,
    root: Option<usize>,
    first_leaf: Option<usize>,
    last_key: Option<RecordKey>,
    latest_balance: Amount,
    len: usize,
}

impl BalanceMht {
    pub fn new(hasher: Hasher) -> Self {
        Self::with_fanout(hasher, DEFAULT_FANOUT).expect("default fanout is valid")
    }

    pub fn with_fanout(hasher: Hasher, fanout: usize) -> Result<Self, BalanceTreeError> {
        if !(MIN_FANOUT..=MAX_FANOUT).contains(&fanout) {
            return Err(BalanceTreeError::InvalidFanout(fanout));
        }
        Ok(BalanceMht {
            hasher,
            fanout,
            nodes: Vec::new(),
            root: None,
            first_leaf: None,
            last_key: None,
            latest_balance: 0,
            len: 0,
        })
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn hasher(&self) -> &Hasher {
        &self.hasher
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_key(&self) -> Option<RecordKey> {
        self.last_key
    }

    /// Balance after the newest record; zero for an empty tree.
    pub fn latest_balance(&self) -> Amount {
        self.latest_balance
    }

    /// The MHTR. An empty tree has the fixed empty-marker digest.
    pub fn root(&self) -> Digest {
        match self.root {
            Some(r) => self.nodes[r].hash(),
            None => empty_root(&self.hasher),
        }
    }

    pub fn height(&self) -> usize {
        let mut h = 0;
        let mut cur = self.root;
        while let Some(id) = cur {
            h += 1;
            cur = match &self.nodes[id] {
                Node::Internal { children, .. } => Some(children[0]),
                Node::Leaf { .. } => None,
            };
        }
        h
    }

    fn leaf_capacity(&self) -> usize {
        self.fanout - 1
    }

    pub fn insert(&mut self, record: BalanceChangeRecord) -> Result<Digest, BalanceTreeError> {
        let key = record.key();
        if let Some(last) = self.last_key {
            if key <= last {
                return Err(BalanceTreeError::NonMonotonicKey { last, got: key });
            }
        }
        if record.new_balance < 0 {
            return Err(BalanceTreeError::NegativeBalance(record.new_balance));
        }
        let expected = self.latest_balance + record.delta;
        if record.new_balance != expected {
            return Err(BalanceTreeError::BrokenRecurrence {
                expected,
                got: record.new_balance,
            });
        }
        self.latest_balance = record.new_balance;
        self.last_key = Some(key);
        self.len += 1;

        let Some(root) = self.root else {
            let hash = leaf_node_hash(&self.hasher, &[record.hash(&self.hasher)]);
            self.nodes.push(Node::Leaf {
                records: vec![record],
                next: None,
                hash,
            });
            self.root = Some(0);
            self.first_leaf = Some(0);
            return Ok(hash);
        };

        let mut path = vec![root];
        while let Node::Internal { children, .. } = &self.nodes[*path.last().unwrap()] {
            path.push(*children.last().unwrap());
        }

        let leaf = path.pop().unwrap();
        if let Node::Leaf { records, .. } = &mut self.nodes[leaf] {
            records.push(record);
        }
        let mut split = self.split_leaf_if_full(leaf);
        self.rehash(leaf);
        let mut child = leaf;
        while let Some(parent) = path.pop() {
            if let Some((sep, right)) = split {
                if let Node::Internal { keys, children, .. } = &mut self.nodes[parent] {
                    keys.push(sep);
                    children.push(right);
                }
            }
            split = self.split_internal_if_full(parent);
            self.rehash(parent);
            child = parent;
        }
        if let Some((sep, right)) = split {
            let new_root = self.nodes.len();
            self.nodes.push(Node::Internal {
                keys: vec![sep],
                children: vec![child, right],
                hash: Digest::default(),
            });
            self.rehash(new_root);
            self.root = Some(new_root);
        }
        Ok(self.root())
    }

    fn split_leaf_if_full(&mut self, id: usize) -> Option<(RecordKey, usize)> {
        let cap = self.leaf_capacity();
        let new_id = self.nodes.len();
        let Node::Leaf { records, next, .. } = &mut self.nodes[id] else {
            unreachable!("leaf expected");
        };
        if records.len() <= cap {
            return None;
        }
        let right = records.split_off(records.len().div_ceil(2));
        let sep = right[0].key();
        let right_next = next.replace(new_id);
        self.nodes.push(Node::Leaf {
            records: right,
            next: right_next,
            hash: Digest::default(),
        });
        self.rehash(new_id);
        Some((sep, new_id))
    }

    fn split_internal_if_full(&mut self, id: usize) -> Option<(RecordKey, usize)> {
        let cap = self.fanout;
        let new_id = self.nodes.len();
        let Node::Internal { keys, children, .. } = &mut self.nodes[id] else {
            unreachable!("internal node expected");
        };
        if children.len() <= cap {
            return None;
        }
        let left_children = children.len().div_ceil(2);
        let right_children = children.split_off(left_children);
        let right_keys = keys.split_off(left_children);
        let sep = keys.pop().expect("separator present");
        self.nodes.push(Node::Internal {
            keys: right_keys,
            children: right_children,
            hash: Digest::default(),
        });
        self.rehash(new_id);
        Some((sep, new_id))
    }

    fn rehash(&mut self, id: usize) {
        let hash = match &self.nodes[id] {
            Node::Leaf { records, .. } => {
                let hashes: Vec<Digest> = records.iter().map(|r| r.hash(&self.hasher)).collect();
                leaf_node_hash(&self.hasher, &hashes)
            }
            Node::Internal { keys, children, .. } => {
                let hashes: Vec<Digest> = children.iter().map(|c| self.nodes[*c].hash()).collect();
                internal_node_hash(&self.hasher, keys, &hashes)
            }
        };
        match &mut self.nodes[id] {
            Node::Leaf { hash: h, .. } | Node::Internal { hash: h, .. } => *h = hash,
        }
    }

    /// Records in key order, following the leaf chain.
    pub fn records(&self) -> LeafChain<'_> {
        LeafChain {
            tree: self,
            leaf: self.first_leaf,
            pos: 0,
        }
    }

    /// Records with `lo <= key <= hi`.
    pub fn range(&self, lo: RecordKey, hi: RecordKey) -> Result<Vec<BalanceChangeRecord>, BalanceTreeError> {
        if lo > hi {
            return Err(BalanceTreeError::InvertedRange { lo, hi });
        }
        Ok(self
            .records()
            .skip_while(|r| r.key() < lo)
            .take_while(|r| r.key() <= hi)
            .cloned()
            .collect())
    }

    /// Balance as of `at` (inclusive): new balance of the last record with
    /// timestamp at or before `at`.
    pub fn balance_at(&self, at: Tick) -> Amount {
        self.records()
            .take_while(|r| r.timestamp <= at)
            .last()
            .map_or(0, |r| r.new_balance)
    }

    pub fn view(&self) -> Option<NodeView> {
        self.root.map(|r| self.view_of(r))
    }

    fn view_of(&self, id: usize) -> NodeView {
        match &self.nodes[id] {
            Node::Leaf { records, hash, .. } => NodeView::Leaf {
                records: records.clone(),
                hash: *hash,
            },
            Node::Internal {
                keys,
                children,
                hash,
            } => NodeView::Internal {
                keys: keys.clone(),
                children: children.iter().map(|c| self.view_of(*c)).collect(),
                hash: *hash,
            },
        }
    }

    /// Leaf depths of every leaf, left to right.
    pub fn leaf_depths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            self.collect_depths(r, 1, &mut out);
        }
        out
    }

    fn collect_depths(&self, id: usize, depth: usize, out: &mut Vec<usize>) {
        match &self.nodes[id] {
            Node::Leaf { .. } => out.push(depth),
            Node::Internal { children, .. } => {
                for c in children {
                    self.collect_depths(*c, depth + 1, out);
                }
            }
        }
    }

    fn separators_consistent(&self, id: usize) -> bool {
        match &self.nodes[id] {
            Node::Leaf { .. } => true,
            Node::Internal { keys, children, .. } => {
                keys.len() + 1 == children.len()
                    && keys
                        .iter()
                        .zip(&children[1..])
                        .all(|(k, c)| *k == self.nodes[*c].first_key(&self.nodes))
                    && children.iter().all(|c| self.separators_consistent(*c))
            }
        }
    }

    /// Structural self-check used by tests and after loading a snapshot.
    pub fn is_well_formed(&self) -> bool {
        match self.root {
            None => self.len == 0,
            Some(r) => {
                let depths = self.leaf_depths();
                depths.windows(2).all(|w| w[0] == w[1])
                    && self.separators_consistent(r)
                    && self.records().count() == self.len
            }
        }
    }
}

/// Iterator over the leaf chain.
pub struct LeafChain<'a> {
    tree: &'a BalanceMht,
    leaf: Option<usize>,
    pos: usize,
}

impl<'a> Iterator for LeafChain<'a> {
    type Item = &'a BalanceChangeRecord;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let id = self.leaf?;
            let Node::Leaf { records, next, .. } = &self.tree.nodes[id] else {
                return None;
            };
            if let Some(r) = records.get(self.pos) {
                self.pos += 1;
                return Some(r);
            }
            self.leaf = *next;
            self.pos = 0;
        }
    }
}
