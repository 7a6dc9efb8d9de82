//! Merkle Hash Grid: a signed snapshot of every client's balance root and
//! every pair's transaction root.
//!
//! Rows and columns follow enrollment order. The diagonal holds balance
//! roots, cells above it hold the pair roots, everything else is the
//! empty-cell marker. Row and column hashes are plain hashes of the
//! concatenated cells; the grid hash covers all row hashes then all column
//! hashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hash::{tag, Digest, HashError, Hasher};
use crate::signature::{KeyDirectory, Keyring, Signature, INTEGRITY_MANAGER};
use crate::types::{ClientId, PairKey};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("state capture needs a quiet period; {0} commits in flight")]
    NotQuiescent(usize),
    #[error("a grid needs at least one client")]
    EmptyGrid,
    #[error("missing balance root for client {0}")]
    MissingRoot(ClientId),
    #[error("grid signature or grid hash does not verify")]
    BadSignature,
    #[error(transparent)]
    Signing(#[from] HashError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleHashGrid {
    pub epoch: u64,
    pub clients: Vec<ClientId>,
    /// Row-major; `None` is an empty cell.
    pub cells: Vec<Vec<Option<Digest>>>,
    pub row_hashes: Vec<Digest>,
    pub column_hashes: Vec<Digest>,
    pub grid_hash: Digest,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridVerdict {
    Matches,
    Mismatch {
        rows: Vec<ClientId>,
        columns: Vec<ClientId>,
        /// Intersections of mismatched rows and columns on or above the
        /// diagonal.
        cells: Vec<(ClientId, ClientId)>,
    },
}

fn cell_value(hasher: &Hasher, cell: &Option<Digest>) -> Digest {
    cell.unwrap_or_else(|| hasher.marker(tag::EMPTY_CELL))
}

fn line_hash(hasher: &Hasher, cells: impl Iterator<Item = Digest>) -> Digest {
    let bytes: Vec<u8> = cells.flat_map(|d| *d.as_bytes()).collect();
    hasher.hash(&[&bytes])
}

/// Cell matrix for the given state.
pub fn layout(
    clients: &[ClientId],
    mhtrs: &BTreeMap<ClientId, Digest>,
    pttrs: &BTreeMap<PairKey, Digest>,
) -> Result<Vec<Vec<Option<Digest>>>, GridError> {
    let mut cells = vec![vec![None; clients.len()]; clients.len()];
    for (i, ci) in clients.iter().enumerate() {
        cells[i][i] = Some(*mhtrs.get(ci).ok_or(GridError::MissingRoot(*ci))?);
        for (j, cj) in clients.iter().enumerate().skip(i + 1) {
            cells[i][j] = PairKey::new(*ci, *cj).and_then(|p| pttrs.get(&p).copied());
        }
    }
    Ok(cells)
}

/// Row hashes, column hashes and grid hash of a cell matrix.
pub fn grid_hashes(hasher: &Hasher, cells: &[Vec<Option<Digest>>]) -> (Vec<Digest>, Vec<Digest>, Digest) {
    let n = cells.len();
    let rows: Vec<Digest> = cells
        .iter()
        .map(|row| line_hash(hasher, row.iter().map(|c| cell_value(hasher, c))))
        .collect();
    let cols: Vec<Digest> = (0..n)
        .map(|j| line_hash(hasher, cells.iter().map(|row| cell_value(hasher, &row[j]))))
        .collect();
    let all: Vec<u8> = rows.iter().chain(&cols).flat_map(|d| *d.as_bytes()).collect();
    let grid = hasher.hash(&[&all]);
    (rows, cols, grid)
}

impl MerkleHashGrid {
    pub fn capture(
        hasher: &Hasher,
        keys: &Keyring,
        epoch: u64,
        clients: &[ClientId],
        mhtrs: &BTreeMap<ClientId, Digest>,
        pttrs: &BTreeMap<PairKey, Digest>,
    ) -> Result<Self, GridError> {
        if clients.is_empty() {
            return Err(GridError::EmptyGrid);
        }
        let cells = layout(clients, mhtrs, pttrs)?;
        let (row_hashes, column_hashes, grid_hash) = grid_hashes(hasher, &cells);
        let signature = keys.sign_root(INTEGRITY_MANAGER, &grid_hash)?;
        Ok(MerkleHashGrid {
            epoch,
            clients: clients.to_vec(),
            cells,
            row_hashes,
            column_hashes,
            grid_hash,
            signature,
        })
    }

    /// Checks the signature, then compares against the current state and the
    /// grid's own cells to localize changes.
    pub fn verify(
        &self,
        hasher: &Hasher,
        keys: &KeyDirectory,
        mhtrs: &BTreeMap<ClientId, Digest>,
        pttrs: &BTreeMap<PairKey, Digest>,
    ) -> Result<GridVerdict, GridError> {
        let n = self.clients.len();
        let all: Vec<u8> = self
            .row_hashes
            .iter()
            .chain(&self.column_hashes)
            .flat_map(|d| *d.as_bytes())
            .collect();
        if self.row_hashes.len() != n
            || self.column_hashes.len() != n
            || self.cells.len() != n
            || self.cells.iter().any(|r| r.len() != n)
            || hasher.hash(&[&all]) != self.grid_hash
            || !keys.verify_from(INTEGRITY_MANAGER, &self.grid_hash, &self.signature)
        {
            return Err(GridError::BadSignature);
        }
        let (own_rows, own_cols, _) = grid_hashes(hasher, &self.cells);
        // A client missing from the state shows up as an empty diagonal cell.
        let current = layout_lenient(&self.clients, mhtrs, pttrs);
        let (cur_rows, cur_cols, _) = grid_hashes(hasher, &current);
        let rows: Vec<usize> = (0..n)
            .filter(|i| cur_rows[*i] != self.row_hashes[*i] || own_rows[*i] != self.row_hashes[*i])
            .collect();
        let cols: Vec<usize> = (0..n)
            .filter(|j| cur_cols[*j] != self.column_hashes[*j] || own_cols[*j] != self.column_hashes[*j])
            .collect();
        if rows.is_empty() && cols.is_empty() {
            return Ok(GridVerdict::Matches);
        }
        let cells = rows
            .iter()
            .flat_map(|i| cols.iter().filter(move |j| *j >= i).map(move |j| (*i, *j)))
            .map(|(i, j)| (self.clients[i], self.clients[j]))
            .collect();
        Ok(GridVerdict::Mismatch {
            rows: rows.iter().map(|i| self.clients[*i]).collect(),
            columns: cols.iter().map(|j| self.clients[*j]).collect(),
            cells,
        })
    }

    /// Text matrix: one line per row with `-` for empty cells, then column
    /// hashes, grid hash and signature.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "epoch {}", self.epoch);
        let ids: Vec<String> = self.clients.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "clients {}", ids.join(" "));
        for (i, row) in self.cells.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| "-".to_string(), |d| d.to_hex()))
                .collect();
            let _ = writeln!(
                out,
                "row {} {} | {}",
                self.clients[i],
                cells.join(" "),
                self.row_hashes[i]
            );
        }
        let cols: Vec<String> = self.column_hashes.iter().map(|d| d.to_hex()).collect();
        let _ = writeln!(out, "columns {}", cols.join(" "));
        let _ = writeln!(out, "grid-hash {}", self.grid_hash);
        let _ = writeln!(
            out,
            "signature {} {}",
            self.signature.signer,
            hex::encode(&self.signature.bytes)
        );
        out
    }
}

fn layout_lenient(
    clients: &[ClientId],
    mhtrs: &BTreeMap<ClientId, Digest>,
    pttrs: &BTreeMap<PairKey, Digest>,
) -> Vec<Vec<Option<Digest>>> {
    let mut cells = vec![vec![None; clients.len()]; clients.len()];
    for (i, ci) in clients.iter().enumerate() {
        cells[i][i] = mhtrs.get(ci).copied();
        for (j, cj) in clients.iter().enumerate().skip(i + 1) {
            cells[i][j] = PairKey::new(*ci, *cj).and_then(|p| pttrs.get(&p).copied());
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("grid text line {line}: {reason}")]
pub struct GridParseError {
    pub line: usize,
    pub reason: String,
}

impl FromStr for MerkleHashGrid {
    type Err = GridParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lines: Vec<(usize, &str)> = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let err = |line: usize, reason: &str| GridParseError {
            line,
            reason: reason.to_string(),
        };
        let digest = |line: usize, t: &str| t.parse::<Digest>().map_err(|e| err(line, &e.to_string()));
        let mut it = lines.into_iter();
        let field = |it: &mut std::vec::IntoIter<(usize, &'_ str)>, key: &str| {
            let (n, l) = it.next().ok_or_else(|| err(0, &format!("missing `{key}` line")))?;
            l.strip_prefix(key)
                .map(|rest| (n, rest.trim().to_string()))
                .ok_or_else(|| err(n, &format!("expected `{key}`")))
        };
        let (n, epoch) = field(&mut it, "epoch")?;
        let epoch = epoch.parse().map_err(|_| err(n, "bad epoch"))?;
        let (n, ids) = field(&mut it, "clients")?;
        let clients = ids
            .split_whitespace()
            .map(|t| t.parse::<ClientId>().map_err(|_| err(n, "bad client id")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cells = Vec::new();
        let mut row_hashes = Vec::new();
        for expected in &clients {
            let (n, rest) = field(&mut it, "row")?;
            let (lhs, rh) = rest.split_once('|').ok_or_else(|| err(n, "missing `|`"))?;
            let mut toks = lhs.split_whitespace();
            let id: ClientId = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(n, "bad row id"))?;
            if id != *expected {
                return Err(err(n, "row ids out of order"));
            }
            let row = toks
                .map(|t| if t == "-" { Ok(None) } else { digest(n, t).map(Some) })
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != clients.len() {
                return Err(err(n, "wrong number of cells"));
            }
            cells.push(row);
            row_hashes.push(digest(n, rh.trim())?);
        }
        let (n, cols) = field(&mut it, "columns")?;
        let column_hashes = cols
            .split_whitespace()
            .map(|t| digest(n, t))
            .collect::<Result<Vec<_>, _>>()?;
        let (n, gh) = field(&mut it, "grid-hash")?;
        let grid_hash = digest(n, &gh)?;
        let (n, sig) = field(&mut it, "signature")?;
        let (signer, bytes) = sig.split_once(' ').ok_or_else(|| err(n, "bad signature"))?;
        let bytes = hex::decode(bytes.trim()).map_err(|_| err(n, "bad signature hex"))?;
        if let Some((n, _)) = it.next() {
            return Err(err(n, "trailing content"));
        }
        Ok(MerkleHashGrid {
            epoch,
            clients,
            cells,
            row_hashes,
            column_hashes,
            grid_hash,
            signature: Signature {
                signer: signer.to_string(),
                bytes,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use sha2::{Digest as _, Sha256};

    use super::*;
    use crate::signature::Ed25519Scheme;

    fn keys() -> Keyring {
        let mut k = Keyring::new(Arc::new(Ed25519Scheme));
        k.insert(INTEGRITY_MANAGER, [9; 32]);
        k
    }

    fn d(x: u8) -> Digest {
        Digest::from_bytes([x; 32])
    }

    fn state(n: u64) -> (Vec<ClientId>, BTreeMap<ClientId, Digest>, BTreeMap<PairKey, Digest>) {
        let clients: Vec<ClientId> = (1..=n).map(ClientId).collect();
        let mhtrs = clients.iter().map(|c| (*c, d(c.0 as u8))).collect();
        let mut pttrs = BTreeMap::new();
        for a in 1..=n {
            for b in a + 1..=n {
                pttrs.insert(PairKey::new(ClientId(a), ClientId(b)).unwrap(), d((10 * a + b) as u8));
            }
        }
        (clients, mhtrs, pttrs)
    }

    /// Independent oracle: explicit byte concatenation and SHA-256.
    fn oracle(cells: &[Vec<[u8; 32]>]) -> (Vec<[u8; 32]>, Vec<[u8; 32]>, [u8; 32]) {
        let n = cells.len();
        let rows: Vec<[u8; 32]> = cells.iter().map(|r| Sha256::digest(r.concat()).into()).collect();
        let cols: Vec<[u8; 32]> = (0..n)
            .map(|j| {
                let col: Vec<u8> = cells.iter().flat_map(|r| r[j]).collect();
                Sha256::digest(col).into()
            })
            .collect();
        let mut all = rows.concat();
        all.extend(cols.concat());
        (rows.clone(), cols.clone(), Sha256::digest(all).into())
    }

    #[test]
    fn three_peer_layout_and_oracle() {
        let h = Hasher::default();
        let (clients, mhtrs, pttrs) = state(3);
        let g = MerkleHashGrid::capture(&h, &keys(), 0, &clients, &mhtrs, &pttrs).unwrap();
        let empty: [u8; 32] = Sha256::digest([0x06]).into();
        let expected = vec![
            vec![[1; 32], [12; 32], [13; 32]],
            vec![empty, [2; 32], [23; 32]],
            vec![empty, empty, [3; 32]],
        ];
        for i in 0..3 {
            for j in 0..3 {
                let got = g.cells[i][j].map_or(empty, |x| *x.as_bytes());
                assert_eq!(got, expected[i][j]);
                assert_eq!(g.cells[i][j].is_some(), j >= i);
            }
        }
        let (rows, cols, grid) = oracle(&expected);
        assert_eq!(g.row_hashes.iter().map(|x| *x.as_bytes()).collect::<Vec<_>>(), rows);
        assert_eq!(g.column_hashes.iter().map(|x| *x.as_bytes()).collect::<Vec<_>>(), cols);
        assert_eq!(*g.grid_hash.as_bytes(), grid);
        assert!(keys().directory().verify(&g.grid_hash, &g.signature));
    }

    #[test]
    fn single_client_grid() {
        let h = Hasher::default();
        let (clients, mhtrs, pttrs) = state(1);
        let g = MerkleHashGrid::capture(&h, &keys(), 0, &clients, &mhtrs, &pttrs).unwrap();
        let row: [u8; 32] = Sha256::digest([1u8; 32]).into();
        let grid: [u8; 32] = Sha256::digest([row, row].concat()).into();
        assert_eq!(*g.grid_hash.as_bytes(), grid);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let h = Hasher::default();
        assert_eq!(
            MerkleHashGrid::capture(&h, &keys(), 0, &[], &BTreeMap::new(), &BTreeMap::new()),
            Err(GridError::EmptyGrid)
        );
    }

    #[test]
    fn every_single_cell_change_is_localized() {
        let h = Hasher::default();
        let (clients, mhtrs, pttrs) = state(4);
        let g = MerkleHashGrid::capture(&h, &keys(), 0, &clients, &mhtrs, &pttrs).unwrap();
        let dir = keys().directory();
        assert_eq!(g.verify(&h, &dir, &mhtrs, &pttrs).unwrap(), GridVerdict::Matches);
        for a in 1..=4u64 {
            for b in a..=4u64 {
                let (mut m, mut p) = (mhtrs.clone(), pttrs.clone());
                if a == b {
                    m.insert(ClientId(a), d(200));
                } else {
                    p.insert(PairKey::new(ClientId(a), ClientId(b)).unwrap(), d(201));
                }
                let (_, _, grid) = grid_hashes(&h, &layout(&clients, &m, &p).unwrap());
                assert_ne!(grid, g.grid_hash);
                assert_eq!(
                    g.verify(&h, &dir, &m, &p).unwrap(),
                    GridVerdict::Mismatch {
                        rows: vec![ClientId(a)],
                        columns: vec![ClientId(b)],
                        cells: vec![(ClientId(a), ClientId(b))],
                    }
                );
            }
        }
    }

    #[test]
    fn capture_is_deterministic() {
        let h = Hasher::default();
        let (clients, mhtrs, pttrs) = state(3);
        let a = MerkleHashGrid::capture(&h, &keys(), 0, &clients, &mhtrs, &pttrs).unwrap();
        let b = MerkleHashGrid::capture(&h, &keys(), 0, &clients, &mhtrs, &pttrs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forged_signature_is_rejected() {
        let h = Hasher::default();
        let (clients, mhtrs, pttrs) = state(2);
        let mut g = MerkleHashGrid::capture(&h, &keys(), 0, &clients, &mhtrs, &pttrs).unwrap();
        g.signature = g.signature.with_bit_flipped(3);
        assert_eq!(
            g.verify(&h, &keys().directory(), &mhtrs, &pttrs),
            Err(GridError::BadSignature)
        );
    }

    #[test]
    fn text_round_trip_and_cell_edit() {
        let h = Hasher::default();
        let (clients, mhtrs, mut pttrs) = state(3);
        pttrs.remove(&PairKey::new(ClientId(1), ClientId(3)).unwrap());
        let g = MerkleHashGrid::capture(&h, &keys(), 2, &clients, &mhtrs, &pttrs).unwrap();
        let text = g.to_text();
        assert!(text.contains(" - "));
        let back: MerkleHashGrid = text.parse().unwrap();
        assert_eq!(back, g);
        // Editing a cell in the text is caught by the grid's own row/column hashes.
        let edited = text.replacen(&d(23).to_hex(), &d(99).to_hex(), 1);
        let g2: MerkleHashGrid = edited.parse().unwrap();
        assert_eq!(
            g2.verify(&h, &keys().directory(), &mhtrs, &pttrs).unwrap(),
            GridVerdict::Mismatch {
                rows: vec![ClientId(2)],
                columns: vec![ClientId(3)],
                cells: vec![(ClientId(2), ClientId(3))],
            }
        );
        assert!("epoch x".parse::<MerkleHashGrid>().is_err());
    }
}
