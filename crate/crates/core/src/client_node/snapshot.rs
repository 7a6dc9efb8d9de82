//! Persistent client state.
//!
//! Layout: `"DCLN" || version u16 || section count u16 || sections`. Each
//! section is `kind u8 || u32 length || bytes || checksum` where the checksum
//! is a tagged hash over the kind and bytes. Sections: one meta section, one
//! balance tree section (the balance tree snapshot format) and one section
//! per pair with its leaves and archived epochs. Local views are derived on
//! load.

use std::collections::BTreeMap;

use crate::balance_mht::{BalanceMht, SnapshotError as TreeSnapshotError, DEFAULT_FANOUT};
use crate::codec::{put_section, DecodeError, Reader};
use crate::hash::{tag, Digest, Hasher};
use crate::peer_ledger::{ArchivedEpoch, LedgerError, PeerTransactionTree};
use crate::types::{ClientId, PairKey};

use super::recovery::derive_local_views;
use super::ClientNode;

const MAGIC: &[u8; 4] = b"DCLN";
const VERSION: u16 = 1;
const META: u8 = 1;
const BALANCES: u8 = 2;
const PAIR: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SnapshotError {
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("snapshot belongs to client {found}, expected {expected}")]
    WrongClient { expected: ClientId, found: ClientId },
    #[error("client has an exchange in flight")]
    NotQuiescent,
}

fn corrupt(e: impl ToString) -> SnapshotError {
    SnapshotError::CorruptSnapshot(e.to_string())
}

impl From<DecodeError> for SnapshotError {
    fn from(e: DecodeError) -> Self {
        corrupt(e)
    }
}

impl From<LedgerError> for SnapshotError {
    fn from(e: LedgerError) -> Self {
        corrupt(e)
    }
}

impl From<TreeSnapshotError> for SnapshotError {
    fn from(e: TreeSnapshotError) -> Self {
        corrupt(e)
    }
}

fn checksum(hasher: &Hasher, kind: u8, bytes: &[u8]) -> Digest {
    hasher.tagged(tag::SECTION, &[&[kind], bytes])
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_leaves(out: &mut Vec<u8>, leaves: &[Vec<u8>]) {
    put_u64(out, leaves.len() as u64);
    for l in leaves {
        put_section(out, l);
    }
}

fn read_leaves(r: &mut Reader<'_>) -> Result<Vec<Vec<u8>>, DecodeError> {
    let n = r.u64()?;
    if n > r.remaining() as u64 {
        return Err(DecodeError::Invalid(format!("{n} leaves in {} bytes", r.remaining())));
    }
    (0..n).map(|_| r.section().map(<[u8]>::to_vec)).collect()
}

impl ClientNode {
    pub fn persist_snapshot(&self) -> Result<Vec<u8>, SnapshotError> {
        if !self.is_idle() {
            return Err(SnapshotError::NotQuiescent);
        }
        let mut sections: Vec<(u8, Vec<u8>)> = Vec::new();

        let mut meta = Vec::new();
        put_u64(&mut meta, self.id.0);
        meta.push(u8::from(self.suspended));
        meta.push(u8::from(self.limit.is_some()));
        meta.extend_from_slice(&self.limit.unwrap_or(0).to_be_bytes());
        meta.push(u8::from(self.critical_threshold.is_some()));
        meta.extend_from_slice(&self.critical_threshold.unwrap_or(0).to_be_bytes());
        put_u64(&mut meta, self.report_seq);
        sections.push((META, meta));

        sections.push((BALANCES, self.balance_tree.to_snapshot()));

        for (pair, t) in &self.ptts {
            let mut s = Vec::new();
            put_u64(&mut s, pair.lo().0);
            put_u64(&mut s, pair.hi().0);
            put_u64(&mut s, t.epoch());
            put_u64(&mut s, t.first_seq());
            s.push(u8::from(t.is_active()));
            put_u64(&mut s, t.archived().len() as u64);
            for a in t.archived() {
                put_u64(&mut s, a.epoch);
                s.extend_from_slice(a.root.as_bytes());
                put_u64(&mut s, a.first_seq);
                put_leaves(&mut s, &a.leaves);
            }
            put_leaves(&mut s, t.leaves());
            sections.push((PAIR, s));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.extend_from_slice(&(sections.len() as u16).to_be_bytes());
        for (kind, bytes) in sections {
            out.push(kind);
            put_section(&mut out, &bytes);
            out.extend_from_slice(checksum(&self.hasher, kind, &bytes).as_bytes());
        }
        Ok(out)
    }

    /// Loads a snapshot of client `id`. An empty input yields a fresh client.
    pub fn load_snapshot(hasher: Hasher, id: ClientId, bytes: &[u8]) -> Result<ClientNode, SnapshotError> {
        if bytes.is_empty() {
            return Ok(ClientNode::new(hasher, id, None));
        }
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u16()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let kind = r.u8()?;
            let body = r.section()?;
            let stored = r.digest()?;
            if checksum(&hasher, kind, body) != stored {
                return Err(corrupt(format!("checksum mismatch in section of kind {kind}")));
            }
            sections.push((kind, body));
        }
        r.finish()?;

        let mut node: Option<ClientNode> = None;
        let mut tree: Option<BalanceMht> = None;
        let mut ptts = BTreeMap::new();
        for (kind, body) in sections {
            let mut r = Reader::new(body);
            match kind {
                META => {
                    let found = ClientId(r.u64()?);
                    if found != id {
                        return Err(SnapshotError::WrongClient { expected: id, found });
                    }
                    let suspended = r.u8()? != 0;
                    let has_limit = r.u8()? != 0;
                    let limit = r.i64()?;
                    let has_threshold = r.u8()? != 0;
                    let threshold = r.i64()?;
                    let report_seq = r.u64()?;
                    r.finish()?;
                    let mut n = ClientNode::new(hasher.clone(), id, has_limit.then_some(limit));
                    n.suspended = suspended;
                    n.critical_threshold = has_threshold.then_some(threshold);
                    n.report_seq = report_seq;
                    node = Some(n);
                }
                BALANCES => tree = Some(BalanceMht::from_snapshot(hasher.clone(), body)?),
                PAIR => {
                    let pair = PairKey::new(ClientId(r.u64()?), ClientId(r.u64()?))
                        .ok_or_else(|| corrupt("pair of identical clients"))?;
                    let epoch = r.u64()?;
                    let first_seq = r.u64()?;
                    let active = r.u8()? != 0;
                    let n_archived = r.u64()?;
                    let mut archived = Vec::new();
                    for _ in 0..n_archived {
                        archived.push(ArchivedEpoch {
                            epoch: r.u64()?,
                            root: r.digest()?,
                            first_seq: r.u64()?,
                            leaves: read_leaves(&mut r)?,
                        });
                    }
                    let leaves = read_leaves(&mut r)?;
                    r.finish()?;
                    let t = PeerTransactionTree::from_parts(hasher.clone(), pair, epoch, first_seq, active, archived, leaves)?;
                    ptts.insert(pair, t);
                }
                other => return Err(corrupt(format!("unknown section kind {other}"))),
            }
        }
        let mut node = node.ok_or_else(|| corrupt("missing meta section"))?;
        node.balance_tree = match tree {
            Some(t) => t,
            None => BalanceMht::with_fanout(hasher, DEFAULT_FANOUT).map_err(corrupt)?,
        };
        node.local_views = derive_local_views(id, &ptts, &node.balance_tree);
        node.ptts = ptts;
        Ok(node)
    }
}
