//! Collision-resistant hashing with domain separation.
//!
//! Every digest in the system is produced by a [`Hasher`], which wraps a
//! pluggable [`HashScheme`]. The first input byte is a domain tag so a leaf,
//! an internal node, a balance commitment or a balance-tree node can never be
//! confused with one another.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Digest as _;

use crate::types::{Amount, ClientId};

pub const DIGEST_LEN: usize = 32;

/// Domain tags prepended to hash inputs.
pub mod tag {
    pub const LEAF: u8 = 0x00;
    pub const INTERNAL: u8 = 0x01;
    pub const BALANCE: u8 = 0x02;
    pub const EMPTY_MHT: u8 = 0x03;
    pub const MHT_LEAF: u8 = 0x04;
    pub const MHT_INTERNAL: u8 = 0x05;
    pub const EMPTY_CELL: u8 = 0x06;
    pub const TEST_SIGNATURE: u8 = 0x07;
    pub const ATTESTATION: u8 = 0x08;
    pub const TREASURY: u8 = 0x09;
    pub const REPORT: u8 = 0x0a;
    pub const SECTION: u8 = 0x0b;
}

/// Fixed-length 32-byte hash value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Returns a copy with one bit inverted; used to build forgeries in tests
    /// and fault injection.
    pub fn with_bit_flipped(&self, bit: usize) -> Digest {
        let mut bytes = self.0;
        bytes[(bit / 8) % DIGEST_LEN] ^= 1 << (bit % 8);
        Digest(bytes)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}…)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid digest `{0}`: expected 64 hex characters")]
pub struct ParseDigestError(pub String);

impl FromStr for Digest {
    type Err = ParseDigestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s.trim(), &mut bytes).map_err(|_| ParseDigestError(s.to_string()))?;
        Ok(Digest(bytes))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HashError {
    #[error("leaf payload must not be empty")]
    EmptyPayload,
    #[error("balance {0} is negative")]
    NegativeBalance(Amount),
    #[error("no signing key registered under `{0}`")]
    UnknownKey(String),
}

/// A deterministic function from bytes to a [`Digest`].
///
/// Implementations hash the concatenation of `chunks`; splitting input into
/// chunks must not change the result.
pub trait HashScheme: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn digest(&self, chunks: &[&[u8]]) -> Digest;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Sha256Scheme;

impl HashScheme for Sha256Scheme {
    fn name(&self) -> &str {
        "sha256"
    }

    fn digest(&self, chunks: &[&[u8]]) -> Digest {
        let mut h = sha2::Sha256::new();
        for c in chunks {
            h.update(c);
        }
        Digest(h.finalize().into())
    }
}

/// Cheap handle to the configured hash scheme.
#[derive(Clone, Debug)]
pub struct Hasher {
    scheme: Arc<dyn HashScheme>,
}

impl Default for Hasher {
    fn default() -> Self {
        Hasher::new(Sha256Scheme)
    }
}

impl Hasher {
    pub fn new(scheme: impl HashScheme + 'static) -> Self {
        Hasher {
            scheme: Arc::new(scheme),
        }
    }

    pub fn scheme_name(&self) -> &str {
        self.scheme.name()
    }

    /// Untagged hash of the concatenated chunks.
    pub fn hash(&self, chunks: &[&[u8]]) -> Digest {
        self.scheme.digest(chunks)
    }

    pub fn tagged(&self, tag: u8, chunks: &[&[u8]]) -> Digest {
        let mut all: Vec<&[u8]> = Vec::with_capacity(chunks.len() + 1);
        let t = [tag];
        all.push(&t);
        all.extend_from_slice(chunks);
        self.scheme.digest(&all)
    }

    /// Hash of the single tag byte; used for sentinel values.
    pub fn marker(&self, tag: u8) -> Digest {
        self.scheme.digest(&[&[tag]])
    }

    pub fn hash_leaf(&self, payload: &[u8]) -> Result<Digest, HashError> {
        if payload.is_empty() {
            return Err(HashError::EmptyPayload);
        }
        Ok(self.tagged(tag::LEAF, &[payload]))
    }

    pub fn hash_internal(&self, left: &Digest, right: &Digest) -> Digest {
        self.tagged(tag::INTERNAL, &[left.as_bytes(), right.as_bytes()])
    }

    /// Salted commitment to a client's balance at a given transaction
    /// sequence number. Anyone holding the plaintext can recompute it.
    pub fn commit_balance(
        &self,
        client: ClientId,
        seq: u64,
        balance: Amount,
    ) -> Result<Digest, HashError> {
        if balance < 0 {
            return Err(HashError::NegativeBalance(balance));
        }
        Ok(self.tagged(
            tag::BALANCE,
            &[
                &client.to_be_bytes(),
                &seq.to_be_bytes(),
                &balance.to_be_bytes(),
            ],
        ))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::HashSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    use proptest::prelude::*;
    use sha2::{Digest as _, Sha256};

    use super::*;

    /// Reference: an independent direct sha2 call over explicit bytes.
    fn oracle(bytes: &[u8]) -> [u8; 32] {
        Sha256::digest(bytes).into()
    }

    /// Counting double that records how often the scheme is invoked.
    #[derive(Debug, Default)]
    pub struct CountingScheme {
        pub calls: AtomicUsize,
    }

    impl HashScheme for Arc<CountingScheme> {
        fn name(&self) -> &str {
            "counting-sha256"
        }

        fn digest(&self, chunks: &[&[u8]]) -> Digest {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Sha256Scheme.digest(chunks)
        }
    }

    #[test]
    fn leaf_rejects_empty_payload() {
        assert_eq!(Hasher::default().hash_leaf(b""), Err(HashError::EmptyPayload));
    }

    #[test]
    fn leaf_is_deterministic_and_matches_oracle() {
        let h = Hasher::default();
        let a = h.hash_leaf(b"A").unwrap();
        assert_eq!(a, h.hash_leaf(b"A").unwrap());
        assert_eq!(a.as_bytes(), &oracle(&[0x00, b'A']));
    }

    #[test]
    fn internal_matches_oracle_and_is_order_sensitive() {
        let h = Hasher::default();
        let a = h.hash_leaf(b"a").unwrap();
        let b = h.hash_leaf(b"b").unwrap();
        let mut pre = vec![0x01];
        pre.extend_from_slice(a.as_bytes());
        pre.extend_from_slice(b.as_bytes());
        assert_eq!(h.hash_internal(&a, &b).as_bytes(), &oracle(&pre));
        assert_ne!(h.hash_internal(&a, &b), h.hash_internal(&b, &a));
        assert_ne!(h.hash_internal(&a, &a), a);
    }

    #[test]
    fn balance_commitment_layout() {
        let h = Hasher::default();
        let c = h.commit_balance(ClientId(1), 1, 1000).unwrap();
        let mut pre = vec![0x02];
        pre.extend_from_slice(&1u64.to_be_bytes());
        pre.extend_from_slice(&1u64.to_be_bytes());
        pre.extend_from_slice(&1000u64.to_be_bytes());
        assert_eq!(c.as_bytes(), &oracle(&pre));
        assert_eq!(c, h.commit_balance(ClientId(1), 1, 1000).unwrap());
        assert_ne!(
            h.commit_balance(ClientId(1), 4, 1500).unwrap(),
            h.commit_balance(ClientId(2), 4, 1500).unwrap()
        );
        assert_eq!(
            h.commit_balance(ClientId(1), 1, -1),
            Err(HashError::NegativeBalance(-1))
        );
    }

    #[test]
    fn commitments_do_not_collide_over_random_triples() {
        use rand::{Rng, SeedableRng};
        let h = Hasher::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut triples = HashSet::new();
        let mut digests = HashSet::new();
        while triples.len() < 10_000 {
            let t = (
                rng.gen_range(0..50u64),
                rng.gen_range(0..50u64),
                rng.gen_range(0..5000i64),
            );
            if triples.insert(t) {
                let d = h.commit_balance(ClientId(t.0), t.1, t.2).unwrap();
                assert!(digests.insert(d), "collision for {t:?}");
            }
        }
    }

    #[test]
    fn scheme_is_pluggable() {
        let counter = Arc::new(CountingScheme::default());
        let h = Hasher::new(counter.clone());
        h.hash_leaf(b"x").unwrap();
        h.hash_internal(&Digest::default(), &Digest::default());
        assert_eq!(counter.calls.load(Ordering::SeqCst), 2);
        assert_eq!(h.scheme_name(), "counting-sha256");
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = Hasher::default().marker(tag::EMPTY_MHT);
        assert_eq!(d.to_hex().parse::<Digest>().unwrap(), d);
        assert!("zz".parse::<Digest>().is_err());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }

    proptest! {
        #[test]
        fn leaf_and_internal_domains_are_separated(p in proptest::collection::vec(any::<u8>(), 64)) {
            let h = Hasher::default();
            let left = Digest::from_bytes(p[..32].try_into().unwrap());
            let right = Digest::from_bytes(p[32..].try_into().unwrap());
            prop_assert_ne!(h.hash_leaf(&p).unwrap(), h.hash_internal(&left, &right));
        }
    }
}
