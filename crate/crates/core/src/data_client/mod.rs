//! Authorized external verifiers.
//!
//! A data client receives records from the subject client together with a
//! verification object. The VO carries everything needed to check the
//! answer: inclusion proofs or a range VO, plus a root signed by the
//! Integrity Manager (transactions) or the Currency Manager (balances).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::balance_mht::{check_range, BalanceChangeRecord, BalanceMht, BalanceTreeError, RangeVo, RecordKey};
use crate::client_node::ClientNode;
use crate::codec::{put_section, DecodeError, Reader};
use crate::currency_manager::{CurrencyManager, MhtrAttestation};
use crate::hash::{tag, Digest, HashError, Hasher};
use crate::integrity_manager::{IntegrityManager, PairAttestation};
use crate::merkle::{self, InclusionProof};
use crate::peer_ledger::{LedgerError, TransactionPairRecord};
use crate::signature::{KeyDirectory, Keyring, Signature};
use crate::types::{ClientId, PairKey};


pub use crate::signature::{CURRENCY_MANAGER as CM_SIGNER, INTEGRITY_MANAGER as IM_SIGNER};

const KIND_TRANSACTIONS: u8 = 1;
const KIND_BALANCES: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataClientError {
    #[error("unknown subject client {0}")]
    UnknownSubject(ClientId),
    #[error("query outside the granted scope: {0}")]
    ScopeViolation(String),
    #[error("no attested root for {0}")]
    NotAttested(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Tree(#[from] BalanceTreeError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// Every transaction of one pair.
    Pair(PairKey),
    /// Transactions of one pair with `pair_seq` in `[lo, hi]`.
    PairSeqs { pair: PairKey, lo: u64, hi: u64 },
    /// The subject's balance history.
    Balances,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub data_client: String,
    pub subject: ClientId,
    pub scopes: Vec<Scope>,
}

impl Grant {
    pub fn permits_pair(&self, pair: PairKey, lo: u64, hi: u64) -> bool {
        self.scopes.iter().any(|s| match *s {
            Scope::Pair(p) => p == pair,
            Scope::PairSeqs { pair: p, lo: a, hi: b } => p == pair && a <= lo && hi <= b,
            Scope::Balances => false,
        })
    }

    pub fn permits_balances(&self) -> bool {
        self.scopes.contains(&Scope::Balances)
    }
}

/// Issues a grant for `subject`. Pair scopes must involve the subject.
pub fn authorize(
    cm: &CurrencyManager,
    data_client: impl Into<String>,
    subject: ClientId,
    scopes: Vec<Scope>,
) -> Result<Grant, DataClientError> {
    if cm.status(subject).is_none() {
        return Err(DataClientError::UnknownSubject(subject));
    }
    for s in &scopes {
        if let Scope::Pair(p) | Scope::PairSeqs { pair: p, .. } = s {
            if !p.contains(subject) {
                return Err(DataClientError::ScopeViolation(format!("pair {p} does not involve {subject}")));
            }
        }
    }
    Ok(Grant {
        data_client: data_client.into(),
        subject,
        scopes,
    })
}

pub fn pair_attestation_digest(hasher: &Hasher, a: &PairAttestation) -> Digest {
    hasher.tagged(
        tag::ATTESTATION,
        &[
            b"pttr",
            &a.pair.lo().0.to_be_bytes(),
            &a.pair.hi().0.to_be_bytes(),
            &a.pair_seq.to_be_bytes(),
            &a.epoch.to_be_bytes(),
            &a.first_seq.to_be_bytes(),
            &a.leaf_count.to_be_bytes(),
            a.pttr.as_bytes(),
        ],
    )
}

pub fn mhtr_attestation_digest(hasher: &Hasher, a: &MhtrAttestation) -> Digest {
    hasher.tagged(
        tag::ATTESTATION,
        &[
            b"mhtr",
            &a.client.0.to_be_bytes(),
            &a.report_seq.to_be_bytes(),
            a.mhtr.as_bytes(),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedPairAttestation {
    pub attestation: PairAttestation,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMhtrAttestation {
    pub attestation: MhtrAttestation,
    pub signature: Signature,
}

/// The Integrity Manager's latest validated root for `pair`, signed.
pub fn attest_pair(
    im: &IntegrityManager,
    hasher: &Hasher,
    keys: &Keyring,
    pair: PairKey,
) -> Result<SignedPairAttestation, DataClientError> {
    let attestation = im
        .validated(pair)
        .ok_or_else(|| DataClientError::NotAttested(format!("pair {pair}")))?;
    let signature = keys.sign_root(IM_SIGNER, &pair_attestation_digest(hasher, &attestation))?;
    Ok(SignedPairAttestation { attestation, signature })
}

/// The Currency Manager's latest accepted balance root for `client`, signed.
pub fn attest_balance(
    cm: &CurrencyManager,
    hasher: &Hasher,
    keys: &Keyring,
    client: ClientId,
) -> Result<SignedMhtrAttestation, DataClientError> {
    let attestation = cm
        .latest_attestation(client)
        .ok_or_else(|| DataClientError::NotAttested(format!("client {client}")))?;
    let signature = keys.sign_root(CM_SIGNER, &mhtr_attestation_digest(hasher, &attestation))?;
    Ok(SignedMhtrAttestation { attestation, signature })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerificationObject {
    TransactionInclusion {
        pair: PairKey,
        lo: u64,
        hi: u64,
        /// Encoded records with their proofs, in `pair_seq` order.
        entries: Vec<(Vec<u8>, InclusionProof)>,
        attestation: SignedPairAttestation,
    },
    BalanceRange {
        client: ClientId,
        records: Vec<BalanceChangeRecord>,
        range: RangeVo,
        attestation: SignedMhtrAttestation,
    },
}

/// Roots the verifier currently accepts as latest, taken from the managers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatestRoots {
    pub pttrs: BTreeMap<PairKey, Digest>,
    pub mhtrs: BTreeMap<ClientId, Digest>,
}

impl LatestRoots {
    pub fn from_managers(cm: &CurrencyManager, im: &IntegrityManager) -> Self {
        LatestRoots {
            pttrs: im.validated_roots(),
            mhtrs: cm
                .clients()
                .filter_map(|c| cm.latest_mhtr(c.id).map(|m| (c.id, m)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub complete: bool,
    pub fresh: bool,
}

impl Verdict {
    pub fn all(&self) -> bool {
        self.correct && self.complete && self.fresh
    }
}

/// Records of `pair` with `pair_seq` in `[lo, hi]`, proven against the
/// Integrity Manager's latest validated root.
pub fn query_transactions(
    grant: &Grant,
    subject: &ClientNode,
    im: &IntegrityManager,
    keys: &Keyring,
    pair: PairKey,
    lo: u64,
    hi: u64,
) -> Result<(Vec<TransactionPairRecord>, VerificationObject), DataClientError> {
    if grant.subject != subject.id() || !grant.permits_pair(pair, lo, hi) {
        return Err(DataClientError::ScopeViolation(format!("{pair} seq {lo}..={hi}")));
    }
    let tree = subject
        .ptt(pair)
        .ok_or_else(|| DataClientError::ScopeViolation(format!("subject has no pair {pair}")))?;
    let attestation = attest_pair(im, subject.hasher(), keys, pair)?;
    let a = &attestation.attestation;
    if a.epoch != tree.epoch() || a.leaf_count as usize > tree.len() {
        return Err(DataClientError::NotAttested(format!("pair {pair} epoch {}", tree.epoch())));
    }
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for (seq, bytes) in (a.first_seq..).zip(&tree.leaves()[..a.leaf_count as usize]) {
        if seq < lo || seq > hi {
            continue;
        }
        let proof = tree.prove(seq, a.leaf_count as usize)?;
        records.push(TransactionPairRecord::decode(bytes)?);
        entries.push((bytes.clone(), proof));
    }
    let vo = VerificationObject::TransactionInclusion {
        pair,
        lo,
        hi,
        entries,
        attestation,
    };
    Ok((records, vo))
}

/// Balance records with key in `[lo, hi]`, proven against the Currency
/// Manager's latest accepted root. If the subject is ahead of the manager
/// the answer is computed on the attested prefix of its history.
pub fn query_balances(
    grant: &Grant,
    subject: &ClientNode,
    cm: &CurrencyManager,
    keys: &Keyring,
    lo: RecordKey,
    hi: RecordKey,
) -> Result<(Vec<BalanceChangeRecord>, VerificationObject), DataClientError> {
    if grant.subject != subject.id() || !grant.permits_balances() {
        return Err(DataClientError::ScopeViolation("balances".into()));
    }
    let attestation = attest_balance(cm, subject.hasher(), keys, subject.id())?;
    let target = attestation.attestation.mhtr;
    let current = subject.balance_tree();
    let (records, range) = if current.root() == target {
        current.range_query(lo, hi)?
    } else {
        attested_prefix(current, &target)?.range_query(lo, hi)?
    };
    let vo = VerificationObject::BalanceRange {
        client: subject.id(),
        records: records.clone(),
        range,
        attestation,
    };
    Ok((records, vo))
}

fn attested_prefix(tree: &BalanceMht, target: &Digest) -> Result<BalanceMht, DataClientError> {
    let mut prefix = BalanceMht::with_fanout(tree.hasher().clone(), tree.fanout())?;
    if prefix.root() == *target {
        return Ok(prefix);
    }
    for r in tree.records() {
        if prefix.insert(r.clone())? == *target {
            return Ok(prefix);
        }
    }
    Err(DataClientError::NotAttested(format!("root {target} is not in the subject's history")))
}

/// Checks a VO using only its own bytes, the attesting public keys and the
/// roots the managers currently report as latest.
pub fn verify_vo(hasher: &Hasher, vo: &VerificationObject, keys: &KeyDirectory, latest: &LatestRoots) -> Verdict {
    match vo {
        VerificationObject::TransactionInclusion {
            pair,
            lo,
            hi,
            entries,
            attestation,
        } => verify_transactions(hasher, *pair, *lo, *hi, entries, attestation, keys, latest),
        VerificationObject::BalanceRange {
            client,
            records,
            range,
            attestation,
        } => {
            let a = &attestation.attestation;
            let signed = a.client == *client
                && keys.verify_from(CM_SIGNER, &mhtr_attestation_digest(hasher, a), &attestation.signature);
            let check = check_range(hasher, records, range);
            let correct = signed && check.correct && range.mhtr == a.mhtr;
            Verdict {
                correct,
                complete: check.complete,
                fresh: latest.mhtrs.get(client) == Some(&a.mhtr),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn verify_transactions(
    hasher: &Hasher,
    pair: PairKey,
    lo: u64,
    hi: u64,
    entries: &[(Vec<u8>, InclusionProof)],
    attestation: &SignedPairAttestation,
    keys: &KeyDirectory,
    latest: &LatestRoots,
) -> Verdict {
    let a = &attestation.attestation;
    let signed = a.pair == pair
        && keys.verify_from(IM_SIGNER, &pair_attestation_digest(hasher, a), &attestation.signature);
    let mut correct = signed;
    let mut seqs = Vec::with_capacity(entries.len());
    for (bytes, proof) in entries {
        let record = TransactionPairRecord::decode(bytes);
        let placed = match &record {
            Ok(r) => {
                r.pair_key() == Some(pair)
                    && r.pair_seq >= a.first_seq
                    && proof.leaf_index == r.pair_seq - a.first_seq
            }
            Err(_) => false,
        };
        if !placed || !merkle::verify_indexed(hasher, bytes, proof, &a.pttr, a.leaf_count) {
            correct = false;
        }
        // Positions are still read from the claimed record so that a bad
        // record does not also count as a gap.
        match record {
            Ok(r) => seqs.push(r.pair_seq),
            Err(_) => seqs.push(a.first_seq + proof.leaf_index),
        }
    }
    let last = (a.first_seq + a.leaf_count).checked_sub(1);
    let expected: Vec<u64> = match last {
        Some(last) if a.leaf_count > 0 && lo <= hi => (lo.max(a.first_seq)..=hi.min(last)).collect(),
        _ => Vec::new(),
    };
    Verdict {
        correct,
        complete: seqs == expected,
        fresh: latest.pttrs.get(&pair) == Some(&a.pttr),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoDecodeError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("unknown VO kind {0}")]
    UnknownKind(u8),
    #[error("invalid pair {0}:{1}")]
    BadPair(u64, u64),
}

fn put_signature(out: &mut Vec<u8>, sig: &Signature) {
    put_section(out, sig.signer.as_bytes());
    put_section(out, &sig.bytes);
}

fn read_signature(r: &mut Reader<'_>) -> Result<Signature, DecodeError> {
    let signer = String::from_utf8(r.section()?.to_vec()).map_err(|e| DecodeError::Invalid(e.to_string()))?;
    Ok(Signature {
        signer,
        bytes: r.section()?.to_vec(),
    })
}

fn read_pair(r: &mut Reader<'_>) -> Result<PairKey, VoDecodeError> {
    let (a, b) = (r.u64()?, r.u64()?);
    PairKey::new(ClientId(a), ClientId(b)).ok_or(VoDecodeError::BadPair(a, b))
}

impl VerificationObject {
    /// `kind || sections`, each section length-prefixed: a header, one
    /// section per record, one per proof (or the range VO), and the
    /// attestation with its signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            VerificationObject::TransactionInclusion {
                pair,
                lo,
                hi,
                entries,
                attestation,
            } => {
                out.push(KIND_TRANSACTIONS);
                let mut header = Vec::new();
                for v in [pair.lo().0, pair.hi().0, *lo, *hi, entries.len() as u64] {
                    header.extend_from_slice(&v.to_be_bytes());
                }
                put_section(&mut out, &header);
                for (bytes, proof) in entries {
                    put_section(&mut out, bytes);
                    put_section(&mut out, &proof.to_bytes());
                }
                let a = &attestation.attestation;
                let mut att = Vec::new();
                for v in [a.pair.lo().0, a.pair.hi().0, a.pair_seq, a.epoch, a.first_seq, a.leaf_count] {
                    att.extend_from_slice(&v.to_be_bytes());
                }
                att.extend_from_slice(a.pttr.as_bytes());
                put_signature(&mut att, &attestation.signature);
                put_section(&mut out, &att);
            }
            VerificationObject::BalanceRange {
                client,
                records,
                range,
                attestation,
            } => {
                out.push(KIND_BALANCES);
                let mut header = Vec::new();
                header.extend_from_slice(&client.0.to_be_bytes());
                header.extend_from_slice(&(records.len() as u64).to_be_bytes());
                put_section(&mut out, &header);
                for r in records {
                    put_section(&mut out, &r.encode());
                }
                put_section(&mut out, &range.to_bytes());
                let a = &attestation.attestation;
                let mut att = Vec::new();
                att.extend_from_slice(&a.client.0.to_be_bytes());
                att.extend_from_slice(&a.report_seq.to_be_bytes());
                att.extend_from_slice(a.mhtr.as_bytes());
                put_signature(&mut att, &attestation.signature);
                put_section(&mut out, &att);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VoDecodeError> {
        let mut r = Reader::new(bytes);
        let kind = r.u8()?;
        let vo = match kind {
            KIND_TRANSACTIONS => {
                let mut h = Reader::new(r.section()?);
                let pair = read_pair(&mut h)?;
                let lo = h.u64()?;
                let hi = h.u64()?;
                let n = h.u64()?;
                h.finish()?;
                if n > r.remaining() as u64 {
                    return Err(DecodeError::Invalid(format!("{n} entries in {} bytes", r.remaining())).into());
                }
                let mut entries = Vec::new();
                for _ in 0..n {
                    let record = r.section()?.to_vec();
                    let proof = InclusionProof::from_bytes(r.section()?)?;
                    entries.push((record, proof));
                }
                let mut a = Reader::new(r.section()?);
                let attestation = PairAttestation {
                    pair: read_pair(&mut a)?,
                    pair_seq: a.u64()?,
                    epoch: a.u64()?,
                    first_seq: a.u64()?,
                    leaf_count: a.u64()?,
                    pttr: a.digest()?,
                };
                let signature = read_signature(&mut a)?;
                a.finish()?;
                VerificationObject::TransactionInclusion {
                    pair,
                    lo,
                    hi,
                    entries,
                    attestation: SignedPairAttestation { attestation, signature },
                }
            }
            KIND_BALANCES => {
                let mut h = Reader::new(r.section()?);
                let client = ClientId(h.u64()?);
                let n = h.u64()?;
                h.finish()?;
                if n > r.remaining() as u64 {
                    return Err(DecodeError::Invalid(format!("{n} records in {} bytes", r.remaining())).into());
                }
                let records = (0..n)
                    .map(|_| BalanceChangeRecord::decode(r.section()?))
                    .collect::<Result<Vec<_>, _>>()?;
                let range = RangeVo::from_bytes(r.section()?)?;
                let mut a = Reader::new(r.section()?);
                let attestation = MhtrAttestation {
                    client: ClientId(a.u64()?),
                    report_seq: a.u64()?,
                    mhtr: a.digest()?,
                };
                let signature = read_signature(&mut a)?;
                a.finish()?;
                VerificationObject::BalanceRange {
                    client,
                    records,
                    range,
                    attestation: SignedMhtrAttestation { attestation, signature },
                }
            }
            other => return Err(VoDecodeError::UnknownKind(other)),
        };
        r.finish()?;
        Ok(vo)
    }

    /// Drops the `index`-th returned record, as a subject hiding data would.
    pub fn omit_record(&mut self, index: usize) -> bool {
        match self {
            VerificationObject::TransactionInclusion { entries, .. } if index < entries.len() => {
                entries.remove(index);
                true
            }
            VerificationObject::BalanceRange { records, .. } if index < records.len() => {
                records.remove(index);
                true
            }
            _ => false,
        }
    }

    pub fn record_count(&self) -> usize {
        match self {
            VerificationObject::TransactionInclusion { entries, .. } => entries.len(),
            VerificationObject::BalanceRange { records, .. } => records.len(),
        }
    }
}
