//! Persistent form of a balance tree.
//!
//! Layout: `"DMHT" || version u16 || fanout u16 || count u64 || mhtr ||
//! records`. The tree is rebuilt on load and its root must equal the stored
//! one.

use super::{BalanceChangeRecord, BalanceMht, BalanceTreeError};
use crate::codec::{DecodeError, Reader};
use crate::hash::{Digest, Hasher};

const MAGIC: &[u8; 4] = b"DMHT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SnapshotError {
    #[error("not a balance tree snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),
    #[error("snapshot root {stored} does not match rebuilt root {rebuilt}: tampered")]
    RootMismatch { stored: Digest, rebuilt: Digest },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tree(#[from] BalanceTreeError),
}

impl BalanceMht {
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.len * super::RECORD_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.extend_from_slice(&(self.fanout as u16).to_be_bytes());
        out.extend_from_slice(&(self.len as u64).to_be_bytes());
        out.extend_from_slice(self.root().as_bytes());
        for r in self.records() {
            out.extend(r.encode());
        }
        out
    }

    pub fn from_snapshot(hasher: Hasher, bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(SnapshotError::UnsupportedVersion(version));
        }
        let fanout = r.u16()? as usize;
        let count = r.u64()?;
        let stored = r.digest()?;
        let mut tree = BalanceMht::with_fanout(hasher, fanout)?;
        for _ in 0..count {
            tree.insert(BalanceChangeRecord::read(&mut r)?)?;
        }
        r.finish()?;
        let rebuilt = tree.root();
        if rebuilt != stored {
            return Err(SnapshotError::RootMismatch { stored, rebuilt });
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{history, tree_of};
    use super::*;

    #[test]
    fn round_trip() {
        let t = tree_of(&history(&[10, 20, -5, 7, 1, 1, 1]), 3);
        let back = BalanceMht::from_snapshot(Hasher::default(), &t.to_snapshot()).unwrap();
        assert_eq!(back.root(), t.root());
        assert_eq!(back.fanout(), 3);
        assert_eq!(back.latest_balance(), t.latest_balance());
    }

    #[test]
    fn empty_round_trip() {
        let t = tree_of(&[], 8);
        let back = BalanceMht::from_snapshot(Hasher::default(), &t.to_snapshot()).unwrap();
        assert_eq!(back.root(), t.root());
    }

    #[test]
    fn tampered_record_is_detected() {
        let t = tree_of(&history(&[10, 20, 30]), 4);
        let mut bytes = t.to_snapshot();
        // Flip a bit inside the last record's causing root.
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(matches!(
            BalanceMht::from_snapshot(Hasher::default(), &bytes),
            Err(SnapshotError::RootMismatch { .. })
        ));
    }

    #[test]
    fn header_errors() {
        let t = tree_of(&history(&[1]), 4);
        let mut bytes = t.to_snapshot();
        bytes[0] = b'X';
        assert_eq!(
            BalanceMht::from_snapshot(Hasher::default(), &bytes).unwrap_err(),
            SnapshotError::BadMagic
        );
        let good = t.to_snapshot();
        assert!(BalanceMht::from_snapshot(Hasher::default(), &good[..good.len() - 3]).is_err());
        let mut v2 = good.clone();
        v2[5] = 9;
        assert_eq!(
            BalanceMht::from_snapshot(Hasher::default(), &v2).unwrap_err(),
            SnapshotError::UnsupportedVersion(9)
        );
    }
}
