//! Persisted state of a finished run and the offline operations on it.
//!
//! A bundle is a set of named files:
//!
//! | file | content |
//! |------|---------|
//! | `meta.json` | seed, fanout, time labels |
//! | `cm.json`, `im.json` | both managers |
//! | `clients/<id>.snap` | client snapshots, `0` is the issuance desk |
//! | `grid.txt` | latest Merkle hash grid, if one was captured |
//! | `keys.txt` | public key directory |
//! | `balances.tsv` | temporal balance table |
//! | `log.txt` | simulation log |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balance_mht::RecordKey;
use crate::client_node::{ClientNode, SnapshotError};
use crate::currency_manager::CurrencyManager;
use crate::data_client::{self, LatestRoots, Scope, Verdict, VerificationObject, VoDecodeError};
use crate::hash::{Digest, Hasher};
use crate::integrity_manager::{GridError, GridParseError, GridVerdict, IntegrityManager, MerkleHashGrid};
use crate::signature::{KeyDirectory, KeyFileError};
use crate::types::{ClientId, PairKey, TimeLabels};

use super::world::{world_keyring, World};

pub const META: &str = "meta.json";
pub const CM: &str = "cm.json";
pub const IM: &str = "im.json";
pub const GRID: &str = "grid.txt";
pub const KEYS: &str = "keys.txt";
pub const BALANCES: &str = "balances.tsv";
pub const LOG: &str = "log.txt";
const CLIENTS: &str = "clients/";

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("state is missing `{0}`")]
    Missing(String),
    #[error("{file}: {message}")]
    Json { file: String, message: String },
    #[error("bad file name `{0}`")]
    BadName(String),
    #[error("client {0} has no snapshot")]
    UnknownClient(ClientId),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Keys(#[from] KeyFileError),
    #[error(transparent)]
    GridText(#[from] GridParseError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Vo(#[from] VoDecodeError),
    #[error(transparent)]
    DataClient(#[from] data_client::DataClientError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMeta {
    pub seed: u64,
    pub fanout: usize,
    pub labels: TimeLabels,
}

/// File name to content. Serializes with hex-encoded contents so it can
/// travel inside JSON.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BundleWire", into = "BundleWire")]
pub struct StateBundle {
    files: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct BundleWire {
    files: BTreeMap<String, String>,
}

impl From<StateBundle> for BundleWire {
    fn from(b: StateBundle) -> Self {
        BundleWire {
            files: b.files.into_iter().map(|(k, v)| (k, hex::encode(v))).collect(),
        }
    }
}

impl TryFrom<BundleWire> for StateBundle {
    type Error = String;

    fn try_from(w: BundleWire) -> Result<Self, String> {
        let mut files = BTreeMap::new();
        for (k, v) in w.files {
            check_name(&k).map_err(|e| e.to_string())?;
            let bytes = hex::decode(&v).map_err(|e| format!("{k}: {e}"))?;
            files.insert(k, bytes);
        }
        Ok(StateBundle { files })
    }
}

/// Relative, `/`-separated, no `..` and no empty parts.
fn check_name(name: &str) -> Result<(), StateError> {
    let ok = !name.is_empty()
        && name
            .split('/')
            .all(|p| !p.is_empty() && p != "." && p != ".." && !p.contains('\\'));
    if ok {
        Ok(())
    } else {
        Err(StateError::BadName(name.to_string()))
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("state types serialize")
}

impl StateBundle {
    pub fn from_world(w: &World) -> Result<StateBundle, StateError> {
        let mut b = StateBundle::default();
        let meta = StateMeta {
            seed: w.config().seed,
            fanout: w.config().fanout,
            labels: w.labels().clone(),
        };
        b.insert(META, json(&meta));
        b.insert(CM, json(w.cm()));
        b.insert(IM, json(w.im()));
        for (id, n) in w.nodes() {
            b.insert(format!("{CLIENTS}{id}.snap"), n.persist_snapshot()?);
        }
        if let Some(g) = w.grids().last() {
            b.insert(GRID, g.to_text().into_bytes());
        }
        b.insert(KEYS, w.directory().to_text().into_bytes());
        b.insert(BALANCES, w.cm().table().to_tsv(w.labels()).into_bytes());
        b.insert(LOG, w.log().to_text().into_bytes());
        Ok(b)
    }

    pub fn insert(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    fn need(&self, name: &str) -> Result<&[u8], StateError> {
        self.get(name).ok_or_else(|| StateError::Missing(name.to_string()))
    }

    fn text(&self, name: &str) -> Result<String, StateError> {
        Ok(String::from_utf8_lossy(self.need(name)?).into_owned())
    }

    fn parse_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, StateError> {
        serde_json::from_slice(self.need(name)?).map_err(|e| StateError::Json {
            file: name.to_string(),
            message: e.to_string(),
        })
    }

    pub fn meta(&self) -> Result<StateMeta, StateError> {
        self.parse_json(META)
    }

    pub fn cm(&self) -> Result<CurrencyManager, StateError> {
        Ok(self.parse_json::<CurrencyManager>(CM)?.rehydrate(Hasher::default()))
    }

    pub fn im(&self) -> Result<IntegrityManager, StateError> {
        Ok(self.parse_json::<IntegrityManager>(IM)?.rehydrate(Hasher::default()))
    }

    pub fn keys(&self) -> Result<KeyDirectory, StateError> {
        Ok(self.text(KEYS)?.parse()?)
    }

    pub fn grid(&self) -> Result<MerkleHashGrid, StateError> {
        Ok(self.text(GRID)?.parse()?)
    }

    pub fn client(&self, id: ClientId) -> Result<ClientNode, StateError> {
        let bytes = self
            .get(&format!("{CLIENTS}{id}.snap"))
            .ok_or(StateError::UnknownClient(id))?;
        Ok(ClientNode::load_snapshot(Hasher::default(), id, bytes)?)
    }

    pub fn clients(&self) -> Result<BTreeMap<ClientId, ClientNode>, StateError> {
        let mut out = BTreeMap::new();
        for name in self.files.keys() {
            let Some(id) = name
                .strip_prefix(CLIENTS)
                .and_then(|r| r.strip_suffix(".snap"))
                .and_then(|r| r.parse::<ClientId>().ok())
            else {
                continue;
            };
            out.insert(id, self.client(id)?);
        }
        Ok(out)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), StateError> {
        for (name, bytes) in &self.files {
            check_name(name)?;
            let path = dir.join(name);
            let io = |source| StateError::Io {
                path: path.display().to_string(),
                source,
            };
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io)?;
            }
            fs::write(&path, bytes).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<StateBundle, StateError> {
        let mut b = StateBundle::default();
        read_into(dir, "", &mut b)?;
        if b.get(META).is_none() {
            return Err(StateError::Missing(META.to_string()));
        }
        Ok(b)
    }
}

fn read_into(dir: &Path, prefix: &str, b: &mut StateBundle) -> Result<(), StateError> {
    let io = |source| StateError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(io)?.collect::<Result<_, _>>().map_err(io)?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = format!("{prefix}{}", e.file_name().to_string_lossy());
        let path = e.path();
        if path.is_dir() {
            read_into(&path, &format!("{name}/"), b)?;
        } else {
            let bytes = fs::read(&path).map_err(|source| StateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            b.insert(name, bytes);
        }
    }
    Ok(())
}

/// The temporal balance table, regenerated from the Currency Manager.
pub fn export_balances(state: &StateBundle) -> Result<String, StateError> {
    let labels = state.meta()?.labels;
    Ok(state.cm()?.table().to_tsv(&labels))
}

/// Roots held by the clients: each client's balance root and, per pair
/// between enrolled clients, the lower id's tree root.
fn client_roots(
    state: &StateBundle,
) -> Result<(BTreeMap<ClientId, Digest>, BTreeMap<PairKey, Digest>), StateError> {
    let mut mhtrs = BTreeMap::new();
    let mut pttrs = BTreeMap::new();
    for (id, n) in state.clients()? {
        if id.is_treasury() {
            continue;
        }
        mhtrs.insert(id, n.mhtr());
        for (pair, t) in n.ptts() {
            if pair.lo() == id {
                if let Some(r) = t.root() {
                    pttrs.insert(*pair, r);
                }
            }
        }
    }
    Ok((mhtrs, pttrs))
}

/// Checks a grid against the client state in the bundle. Uses the bundle's
/// own grid when `grid` is `None`.
pub fn verify_grid_against_state(
    state: &StateBundle,
    grid: Option<&MerkleHashGrid>,
) -> Result<GridVerdict, StateError> {
    let owned;
    let grid = match grid {
        Some(g) => g,
        None => {
            owned = state.grid()?;
            &owned
        }
    };
    let (mhtrs, pttrs) = client_roots(state)?;
    let im = state.im()?;
    Ok(im.verify_grid(grid, &state.keys()?, &mhtrs, &pttrs)?)
}

/// What to prove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProofQuery {
    Pair { pair: PairKey, lo: u64, hi: u64 },
    Balances { lo: RecordKey, hi: RecordKey },
}

/// Builds the verification object `subject` would hand a data client.
/// Signing keys are re-derived from the run's seed.
pub fn prove(state: &StateBundle, subject: ClientId, query: ProofQuery) -> Result<VerificationObject, StateError> {
    let meta = state.meta()?;
    let cm = state.cm()?;
    let node = state.client(subject)?;
    let keys = world_keyring(meta.seed, []);
    let scope = match query {
        ProofQuery::Pair { pair, .. } => Scope::Pair(pair),
        ProofQuery::Balances { .. } => Scope::Balances,
    };
    let grant = data_client::authorize(&cm, "prover", subject, vec![scope])?;
    let vo = match query {
        ProofQuery::Pair { pair, lo, hi } => {
            let im = state.im()?;
            data_client::query_transactions(&grant, &node, &im, &keys, pair, lo, hi)?.1
        }
        ProofQuery::Balances { lo, hi } => data_client::query_balances(&grant, &node, &cm, &keys, lo, hi)?.1,
    };
    Ok(vo)
}

/// Verifies encoded VO bytes. Without state the latest roots are unknown,
/// so freshness is judged against the VO's own attested root and always
/// holds; callers should then look at correctness and completeness only.
pub fn check_vo(bytes: &[u8], keys: &KeyDirectory, state: Option<&StateBundle>) -> Result<Verdict, StateError> {
    let vo = VerificationObject::from_bytes(bytes)?;
    let hasher = Hasher::default();
    let latest = match state {
        Some(s) => LatestRoots::from_managers(&s.cm()?, &s.im()?),
        None => self_latest(&vo),
    };
    Ok(data_client::verify_vo(&hasher, &vo, keys, &latest))
}

fn self_latest(vo: &VerificationObject) -> LatestRoots {
    let mut l = LatestRoots::default();
    match vo {
        VerificationObject::TransactionInclusion { pair, attestation, .. } => {
            l.pttrs.insert(*pair, attestation.attestation.pttr);
        }
        VerificationObject::BalanceRange {
            client, attestation, ..
        } => {
            l.mhtrs.insert(*client, attestation.attestation.mhtr);
        }
    }
    l
}
