//! Range queries with verification objects.
//!
//! The VO is the tree pruned to the paths that reach the answer plus one
//! boundary record on each side. Everything else is replaced by its hash, so
//! a verifier can fold the VO back to the MHTR and confirm that no record in
//! the range was skipped.

use serde::{Deserialize, Serialize};

use super::{
    empty_root, internal_node_hash, leaf_node_hash, BalanceChangeRecord, BalanceMht,
    BalanceTreeError, Node, RecordKey,
};
use crate::codec::{DecodeError, Reader};
use crate::hash::{Digest, Hasher};

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoEntry {
    /// A record outside the answer, known only by hash.
    Hidden(Digest),
    /// Placeholder for the next record of the answer, in order.
    Returned,
    /// The record just outside the range, revealed to prove adjacency.
    Boundary(BalanceChangeRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoNode {
    Pruned(Digest),
    Leaf(Vec<VoEntry>),
    Internal {
        keys: Vec<RecordKey>,
        children: Vec<VoNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeVo {
    pub lo: RecordKey,
    pub hi: RecordKey,
    /// Root the VO claims to fold to.
    pub mhtr: Digest,
    /// `None` for an empty tree.
    pub root: Option<VoNode>,
}

/// Outcome of checking a VO on its own, before comparing against a trusted
/// root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeCheck {
    /// The records and VO fold to the VO's claimed MHTR.
    pub correct: bool,
    /// Nothing between the boundaries was withheld.
    pub complete: bool,
}

impl BalanceMht {
    /// All records with key in `[lo, hi]` and a VO proving the answer.
    pub fn range_query(
        &self,
        lo: RecordKey,
        hi: RecordKey,
    ) -> Result<(Vec<BalanceChangeRecord>, RangeVo), BalanceTreeError> {
        let records = self.range(lo, hi)?;
        let mut vo = RangeVo {
            lo,
            hi,
            mhtr: self.root(),
            root: None,
        };
        let Some(root) = self.root else {
            return Ok((records, vo));
        };
        let before = self.records().take_while(|r| r.key() < lo).count();
        let through = before + records.len();
        let first = before.saturating_sub(1);
        let last = through.min(self.len - 1);
        let mut offset = 0;
        vo.root = Some(self.prune(root, &mut offset, first, last, before, through));
        Ok((records, vo))
    }

    fn subtree_len(&self, id: usize) -> usize {
        match &self.nodes[id] {
            Node::Leaf { records, .. } => records.len(),
            Node::Internal { children, .. } => children.iter().map(|c| self.subtree_len(*c)).sum(),
        }
    }

    /// Prunes subtree `id` whose first record has global index `*offset`.
    /// Records `first..=last` stay visible; `answer_lo..answer_hi` of those
    /// are the answer.
    fn prune(
        &self,
        id: usize,
        offset: &mut usize,
        first: usize,
        last: usize,
        answer_lo: usize,
        answer_hi: usize,
    ) -> VoNode {
        let start = *offset;
        let size = self.subtree_len(id);
        if start + size <= first || start > last {
            *offset += size;
            return VoNode::Pruned(self.nodes[id].hash());
        }
        match &self.nodes[id] {
            Node::Leaf { records, .. } => {
                let entries = records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let g = start + i;
                        if g < first || g > last {
                            VoEntry::Hidden(r.hash(&self.hasher))
                        } else if (answer_lo..answer_hi).contains(&g) {
                            VoEntry::Returned
                        } else {
                            VoEntry::Boundary(r.clone())
                        }
                    })
                    .collect();
                *offset += size;
                VoNode::Leaf(entries)
            }
            Node::Internal { keys, children, .. } => VoNode::Internal {
                keys: keys.clone(),
                children: children
                    .iter()
                    .map(|c| self.prune(*c, offset, first, last, answer_lo, answer_hi))
                    .collect(),
            },
        }
    }
}

enum Item {
    Opaque,
    Visible { key: RecordKey, returned: bool },
}

struct Folder<'a> {
    hasher: &'a Hasher,
    records: std::slice::Iter<'a, BalanceChangeRecord>,
    items: Vec<Item>,
    ok: bool,
}

impl Folder<'_> {
    fn fold(&mut self, node: &VoNode) -> Digest {
        match node {
            VoNode::Pruned(d) => {
                self.items.push(Item::Opaque);
                *d
            }
            VoNode::Leaf(entries) => {
                if entries.is_empty() {
                    self.ok = false;
                }
                let hashes: Vec<Digest> = entries
                    .iter()
                    .map(|e| match e {
                        VoEntry::Hidden(d) => {
                            self.items.push(Item::Opaque);
                            *d
                        }
                        VoEntry::Returned => match self.records.next() {
                            Some(r) => {
                                self.items.push(Item::Visible {
                                    key: r.key(),
                                    returned: true,
                                });
                                r.hash(self.hasher)
                            }
                            None => {
                                self.ok = false;
                                Digest::default()
                            }
                        },
                        VoEntry::Boundary(r) => {
                            self.items.push(Item::Visible {
                                key: r.key(),
                                returned: false,
                            });
                            r.hash(self.hasher)
                        }
                    })
                    .collect();
                leaf_node_hash(self.hasher, &hashes)
            }
            VoNode::Internal { keys, children } => {
                if children.len() != keys.len() + 1 {
                    self.ok = false;
                }
                let hashes: Vec<Digest> = children.iter().map(|c| self.fold(c)).collect();
                internal_node_hash(self.hasher, keys, &hashes)
            }
        }
    }
}

fn complete(items: &[Item], lo: RecordKey, hi: RecordKey) -> bool {
    let visible: Vec<(usize, RecordKey, bool)> = items
        .iter()
        .enumerate()
        .filter_map(|(i, it)| match it {
            Item::Visible { key, returned } => Some((i, *key, *returned)),
            Item::Opaque => None,
        })
        .collect();
    let (Some(&(first_pos, first_key, first_ret)), Some(&(last_pos, last_key, last_ret))) =
        (visible.first(), visible.last())
    else {
        return false;
    };
    if last_pos - first_pos + 1 != visible.len() {
        return false;
    }
    if visible.windows(2).any(|w| w[0].1 >= w[1].1) {
        return false;
    }
    let n = visible.len();
    for (idx, &(_, key, returned)) in visible.iter().enumerate() {
        let in_range = lo <= key && key <= hi;
        if returned != in_range {
            return false;
        }
        if !returned && idx != 0 && idx != n - 1 {
            return false;
        }
    }
    if first_pos > 0 && (first_ret || first_key >= lo) {
        return false;
    }
    if last_pos + 1 < items.len() && (last_ret || last_key <= hi) {
        return false;
    }
    true
}

/// Checks `records` against `vo` without a trusted root.
pub fn check_range(hasher: &Hasher, records: &[BalanceChangeRecord], vo: &RangeVo) -> RangeCheck {
    if vo.lo > vo.hi {
        return RangeCheck {
            correct: false,
            complete: false,
        };
    }
    let Some(root) = &vo.root else {
        let ok = records.is_empty() && vo.mhtr == empty_root(hasher);
        return RangeCheck {
            correct: ok,
            complete: ok,
        };
    };
    let mut f = Folder {
        hasher,
        records: records.iter(),
        items: Vec::new(),
        ok: true,
    };
    let folded = f.fold(root);
    let correct = f.ok && f.records.next().is_none() && folded == vo.mhtr;
    RangeCheck {
        correct,
        complete: correct && complete(&f.items, vo.lo, vo.hi),
    }
}

/// True iff the answer folds to `trusted_mhtr` and is complete.
pub fn verify_range(
    hasher: &Hasher,
    records: &[BalanceChangeRecord],
    vo: &RangeVo,
    trusted_mhtr: &Digest,
) -> bool {
    let c = check_range(hasher, records, vo);
    c.correct && c.complete && vo.mhtr == *trusted_mhtr
}

impl RangeVo {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.lo.to_bytes());
        out.extend_from_slice(&self.hi.to_bytes());
        out.extend_from_slice(self.mhtr.as_bytes());
        match &self.root {
            None => out.push(0),
            Some(n) => {
                out.push(1);
                encode_node(n, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let vo = Self::read(&mut r)?;
        r.finish()?;
        Ok(vo)
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let lo = RecordKey::read(r)?;
        let hi = RecordKey::read(r)?;
        let mhtr = r.digest()?;
        let root = match r.u8()? {
            0 => None,
            1 => Some(decode_node(r, 0)?),
            b => return Err(DecodeError::Invalid(format!("root marker {b}"))),
        };
        Ok(RangeVo { lo, hi, mhtr, root })
    }
}

fn encode_node(n: &VoNode, out: &mut Vec<u8>) {
    match n {
        VoNode::Pruned(d) => {
            out.push(0);
            out.extend_from_slice(d.as_bytes());
        }
        VoNode::Leaf(entries) => {
            out.push(1);
            out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
            for e in entries {
                match e {
                    VoEntry::Hidden(d) => {
                        out.push(0);
                        out.extend_from_slice(d.as_bytes());
                    }
                    VoEntry::Returned => out.push(1),
                    VoEntry::Boundary(r) => {
                        out.push(2);
                        out.extend(r.encode());
                    }
                }
            }
        }
        VoNode::Internal { keys, children } => {
            out.push(2);
            out.extend_from_slice(&(keys.len() as u32).to_be_bytes());
            for k in keys {
                out.extend_from_slice(&k.to_bytes());
            }
            for c in children {
                encode_node(c, out);
            }
        }
    }
}

fn decode_node(r: &mut Reader<'_>, depth: usize) -> Result<VoNode, DecodeError> {
    if depth > MAX_DEPTH {
        return Err(DecodeError::Invalid("verification object nested too deeply".into()));
    }
    match r.u8()? {
        0 => Ok(VoNode::Pruned(r.digest()?)),
        1 => {
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n.min(r.remaining()));
            for _ in 0..n {
                entries.push(match r.u8()? {
                    0 => VoEntry::Hidden(r.digest()?),
                    1 => VoEntry::Returned,
                    2 => VoEntry::Boundary(BalanceChangeRecord::read(r)?),
                    b => return Err(DecodeError::Invalid(format!("entry tag {b}"))),
                });
            }
            Ok(VoNode::Leaf(entries))
        }
        2 => {
            let n = r.u32()? as usize;
            let mut keys = Vec::with_capacity(n.min(r.remaining()));
            for _ in 0..n {
                keys.push(RecordKey::read(r)?);
            }
            let mut children = Vec::with_capacity(keys.len() + 1);
            for _ in 0..=n {
                children.push(decode_node(r, depth + 1)?);
            }
            Ok(VoNode::Internal { keys, children })
        }
        b => Err(DecodeError::Invalid(format!("node tag {b}"))),
    }
}
