//! Append-capable binary Merkle tree with inclusion proofs.
//!
//! Level 0 holds the leaf digests. Each higher level pairs adjacent nodes
//! left to right; an unpaired rightmost node is promoted unchanged.

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Reader};
use crate::hash::{Digest, HashError, Hasher};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MerkleError {
    #[error("a Merkle tree needs at least one leaf")]
    EmptyTree,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Hash(#[from] HashError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn build<I, P>(hasher: &Hasher, payloads: I) -> Result<Self, MerkleError>
    where
        I: IntoIterator<Item = P>,
        P: AsRef<[u8]>,
    {
        let leaves = payloads
            .into_iter()
            .map(|p| hasher.hash_leaf(p.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_leaf_digests(hasher, leaves)
    }

    pub fn from_leaf_digests(hasher: &Hasher, leaves: Vec<Digest>) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::EmptyTree);
        }
        let mut levels = vec![leaves];
        while levels.last().map_or(0, Vec::len) > 1 {
            let below = levels.last().expect("non-empty");
            let above = below
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => hasher.hash_internal(l, r),
                    [single] => *single,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(above);
        }
        Ok(MerkleTree { levels })
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("tree has levels")[0]
    }

    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    /// Appends one payload, updating only the right spine.
    pub fn push(&mut self, hasher: &Hasher, payload: &[u8]) -> Result<(), MerkleError> {
        let leaf = hasher.hash_leaf(payload)?;
        self.push_digest(hasher, leaf);
        Ok(())
    }

    pub fn push_digest(&mut self, hasher: &Hasher, leaf: Digest) {
        self.levels[0].push(leaf);
        self.repair_spine(hasher);
    }

    /// Value-semantic append.
    pub fn appended(&self, hasher: &Hasher, payload: &[u8]) -> Result<Self, MerkleError> {
        let mut next = self.clone();
        next.push(hasher, payload)?;
        Ok(next)
    }

    /// Drops leaves beyond `len`. Fails on `len == 0` since a tree is never
    /// empty.
    pub fn truncate(&mut self, hasher: &Hasher, len: usize) -> Result<(), MerkleError> {
        if len == 0 {
            return Err(MerkleError::EmptyTree);
        }
        if len < self.len() {
            self.levels[0].truncate(len);
            self.repair_spine(hasher);
        }
        Ok(())
    }

    /// Recomputes the rightmost node of every level from the one below and
    /// trims levels so the last one holds exactly the root.
    fn repair_spine(&mut self, hasher: &Hasher) {
        let mut k = 0;
        while self.levels[k].len() > 1 {
            let below_len = self.levels[k].len();
            let parent_len = below_len.div_ceil(2);
            if self.levels.len() == k + 1 {
                self.levels.push(Vec::new());
            }
            let last = parent_len - 1;
            let i = 2 * last;
            let node = if i + 1 < below_len {
                hasher.hash_internal(&self.levels[k][i], &self.levels[k][i + 1])
            } else {
                self.levels[k][i]
            };
            let parent = &mut self.levels[k + 1];
            parent.truncate(parent_len);
            if parent.len() == parent_len {
                parent[last] = node;
            } else {
                debug_assert_eq!(parent.len() + 1, parent_len);
                parent.push(node);
            }
            k += 1;
        }
        self.levels.truncate(k + 1);
    }

    pub fn prove(&self, leaf_index: usize) -> Result<InclusionProof, MerkleError> {
        let len = self.len();
        if leaf_index >= len {
            return Err(MerkleError::IndexOutOfRange {
                index: leaf_index,
                len,
            });
        }
        let mut path = Vec::new();
        let mut idx = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling = idx ^ 1;
            if sibling < level.len() {
                let side = if sibling < idx { Side::Left } else { Side::Right };
                path.push(PathStep {
                    sibling: level[sibling],
                    side,
                });
            }
            idx /= 2;
        }
        Ok(InclusionProof {
            leaf_index: leaf_index as u64,
            path,
            claimed_root: self.root(),
        })
    }
}

/// Which side of the running hash the sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub sibling: Digest,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub path: Vec<PathStep>,
    pub claimed_root: Digest,
}

impl InclusionProof {
    /// `leaf_index(8) || path_len(4) || (side(1) || digest(32))* || root(32)`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 33 * self.path.len() + 32);
        out.extend_from_slice(&self.leaf_index.to_be_bytes());
        out.extend_from_slice(&(self.path.len() as u32).to_be_bytes());
        for step in &self.path {
            out.push(match step.side {
                Side::Left => 0,
                Side::Right => 1,
            });
            out.extend_from_slice(step.sibling.as_bytes());
        }
        out.extend_from_slice(self.claimed_root.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let proof = Self::read(&mut r)?;
        r.finish()?;
        Ok(proof)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let leaf_index = r.u64()?;
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(DecodeError::Invalid(format!("proof path of length {n}")));
        }
        let mut path = Vec::with_capacity(n);
        for _ in 0..n {
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                s => return Err(DecodeError::Invalid(format!("side byte {s}"))),
            };
            path.push(PathStep {
                sibling: r.digest()?,
                side,
            });
        }
        Ok(InclusionProof {
            leaf_index,
            path,
            claimed_root: r.digest()?,
        })
    }
}

/// Folds `hash_leaf(payload)` along the proof path and compares with
/// `expected_root`. Never errors; any mismatch is `false`.
pub fn verify(hasher: &Hasher, payload: &[u8], proof: &InclusionProof, expected_root: &Digest) -> bool {
    if proof.claimed_root != *expected_root {
        return false;
    }
    let Ok(mut acc) = hasher.hash_leaf(payload) else {
        return false;
    };
    for step in &proof.path {
        acc = match step.side {
            Side::Left => hasher.hash_internal(&step.sibling, &acc),
            Side::Right => hasher.hash_internal(&acc, &step.sibling),
        };
    }
    acc == *expected_root
}

/// Sibling sides a proof for `leaf_index` must have in a tree of `len`
/// leaves, bottom up. `None` when the index is out of range.
pub fn path_shape(leaf_index: u64, len: u64) -> Option<Vec<Side>> {
    if leaf_index >= len {
        return None;
    }
    let (mut idx, mut width) = (leaf_index, len);
    let mut sides = Vec::new();
    while width > 1 {
        let sibling = idx ^ 1;
        if sibling < width {
            sides.push(if sibling < idx { Side::Left } else { Side::Right });
        }
        idx /= 2;
        width = width.div_ceil(2);
    }
    Some(sides)
}

/// [`verify`] plus a check that the proof's index and path shape fit a tree
/// of `len` leaves, so a valid proof cannot be relabeled to another position.
pub fn verify_indexed(hasher: &Hasher, payload: &[u8], proof: &InclusionProof, expected_root: &Digest, len: u64) -> bool {
    let Some(shape) = path_shape(proof.leaf_index, len) else {
        return false;
    };
    shape.len() == proof.path.len()
        && shape.iter().zip(&proof.path).all(|(s, step)| *s == step.side)
        && verify(hasher, payload, proof, expected_root)
}
