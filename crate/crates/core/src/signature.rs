//! Detached signatures over root hashes.
//!
//! Signing goes through a [`Keyring`] that maps participant labels to key
//! pairs; verification only needs a [`KeyDirectory`] of public keys.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::{Signer as _, Verifier as _};
use serde::{Deserialize, Serialize};

use crate::hash::{tag, Digest, HashError, HashScheme, Sha256Scheme};

pub const CURRENCY_MANAGER: &str = "cm";
pub const INTEGRITY_MANAGER: &str = "im";

/// A signature scheme over arbitrary messages with 32-byte secret seeds.
pub trait SignatureScheme: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn public_key(&self, secret: &[u8; 32]) -> Vec<u8>;
    fn sign(&self, secret: &[u8; 32], msg: &[u8]) -> Vec<u8>;
    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Ed25519Scheme;

impl SignatureScheme for Ed25519Scheme {
    fn name(&self) -> &'static str {
        "ed25519"
    }

    fn public_key(&self, secret: &[u8; 32]) -> Vec<u8> {
        ed25519_dalek::SigningKey::from_bytes(secret)
            .verifying_key()
            .to_bytes()
            .to_vec()
    }

    fn sign(&self, secret: &[u8; 32], msg: &[u8]) -> Vec<u8> {
        ed25519_dalek::SigningKey::from_bytes(secret)
            .sign(msg)
            .to_bytes()
            .to_vec()
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let Ok(public) = <[u8; 32]>::try_from(public) else {
            return false;
        };
        let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
            return false;
        };
        key.verify(msg, &sig).is_ok()
    }
}

/// Deterministic keyed-hash scheme for tests. Anyone holding the public key
/// can produce valid signatures, so it only models key binding, never
/// unforgeability.
#[derive(Debug, Default, Clone, Copy)]
pub struct InsecureTestScheme;

impl InsecureTestScheme {
    fn mac(public: &[u8], msg: &[u8]) -> Vec<u8> {
        Sha256Scheme
            .digest(&[&[tag::TEST_SIGNATURE], public, msg])
            .as_bytes()
            .to_vec()
    }
}

impl SignatureScheme for InsecureTestScheme {
    fn name(&self) -> &'static str {
        "test"
    }

    fn public_key(&self, secret: &[u8; 32]) -> Vec<u8> {
        Sha256Scheme.digest(&[secret]).as_bytes().to_vec()
    }

    fn sign(&self, secret: &[u8; 32], msg: &[u8]) -> Vec<u8> {
        Self::mac(&self.public_key(secret), msg)
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        Self::mac(public, msg) == sig
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown signature scheme `{0}`")]
pub struct UnknownScheme(pub String);

pub fn scheme_by_name(name: &str) -> Result<Arc<dyn SignatureScheme>, UnknownScheme> {
    match name {
        "ed25519" => Ok(Arc::new(Ed25519Scheme)),
        "test" => Ok(Arc::new(InsecureTestScheme)),
        other => Err(UnknownScheme(other.to_string())),
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: String,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}, {})", self.signer, hex::encode(&self.bytes))
    }
}

impl Signature {
    pub fn with_bit_flipped(&self, bit: usize) -> Signature {
        let mut out = self.clone();
        if !out.bytes.is_empty() {
            let i = (bit / 8) % out.bytes.len();
            out.bytes[i] ^= 1 << (bit % 8);
        }
        out
    }
}

struct KeyPair {
    secret: [u8; 32],
    public: Vec<u8>,
}

/// Signing keys of the participants this process acts for.
#[derive(Clone)]
pub struct Keyring {
    scheme: Arc<dyn SignatureScheme>,
    keys: BTreeMap<String, Arc<KeyPair>>,
}

impl fmt::Debug for Keyring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keyring")
            .field("scheme", &self.scheme.name())
            .field("labels", &self.keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Keyring {
    pub fn new(scheme: Arc<dyn SignatureScheme>) -> Self {
        Keyring {
            scheme,
            keys: BTreeMap::new(),
        }
    }

    pub fn scheme_name(&self) -> &'static str {
        self.scheme.name()
    }

    /// Registers a key derived from `secret`, replacing any previous key
    /// under the same label.
    pub fn insert(&mut self, label: impl Into<String>, secret: [u8; 32]) -> Vec<u8> {
        let public = self.scheme.public_key(&secret);
        self.keys.insert(
            label.into(),
            Arc::new(KeyPair {
                secret,
                public: public.clone(),
            }),
        );
        public
    }

    pub fn contains(&self, label: &str) -> bool {
        self.keys.contains_key(label)
    }

    pub fn public_key(&self, label: &str) -> Option<&[u8]> {
        self.keys.get(label).map(|k| k.public.as_slice())
    }

    pub fn sign_root(&self, label: &str, root: &Digest) -> Result<Signature, HashError> {
        let key = self
            .keys
            .get(label)
            .ok_or_else(|| HashError::UnknownKey(label.to_string()))?;
        Ok(Signature {
            signer: label.to_string(),
            bytes: self.scheme.sign(&key.secret, root.as_bytes()),
        })
    }

    pub fn directory(&self) -> KeyDirectory {
        KeyDirectory {
            scheme: self.scheme.clone(),
            keys: self
                .keys
                .iter()
                .map(|(l, k)| (l.clone(), k.public.clone()))
                .collect(),
        }
    }
}

pub fn verify_root(
    scheme: &dyn SignatureScheme,
    root: &Digest,
    sig: &Signature,
    public: &[u8],
) -> bool {
    scheme.verify(public, root.as_bytes(), &sig.bytes)
}

/// Public keys by participant label.
#[derive(Clone)]
pub struct KeyDirectory {
    scheme: Arc<dyn SignatureScheme>,
    keys: BTreeMap<String, Vec<u8>>,
}

impl fmt::Debug for KeyDirectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyDirectory")
            .field("scheme", &self.scheme.name())
            .field("labels", &self.keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl KeyDirectory {
    pub fn new(scheme: Arc<dyn SignatureScheme>) -> Self {
        KeyDirectory {
            scheme,
            keys: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, label: impl Into<String>, public: Vec<u8>) {
        self.keys.insert(label.into(), public);
    }

    pub fn get(&self, label: &str) -> Option<&[u8]> {
        self.keys.get(label).map(Vec::as_slice)
    }

    pub fn scheme(&self) -> &dyn SignatureScheme {
        self.scheme.as_ref()
    }

    /// Checks `sig` against the key registered for its signer label and
    /// additionally requires that label to be `expected_signer`.
    pub fn verify_from(&self, expected_signer: &str, root: &Digest, sig: &Signature) -> bool {
        sig.signer == expected_signer && self.verify(root, sig)
    }

    pub fn verify(&self, root: &Digest, sig: &Signature) -> bool {
        match self.keys.get(&sig.signer) {
            Some(public) => verify_root(self.scheme.as_ref(), root, sig, public),
            None => false,
        }
    }

    /// Text form: a `scheme <name>` line followed by `<label> <hex key>` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("scheme {}\n", self.scheme.name());
        for (label, key) in &self.keys {
            out.push_str(&format!("{label} {}\n", hex::encode(key)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyFileError {
    #[error("key file is missing the `scheme` line")]
    MissingScheme,
    #[error(transparent)]
    Scheme(#[from] UnknownScheme),
    #[error("line {0}: expected `<label> <hex key>`")]
    BadLine(usize),
}

impl FromStr for KeyDirectory {
    type Err = KeyFileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (_, first) = lines.next().ok_or(KeyFileError::MissingScheme)?;
        let name = first
            .strip_prefix("scheme ")
            .ok_or(KeyFileError::MissingScheme)?;
        let mut dir = KeyDirectory::new(scheme_by_name(name.trim())?);
        for (n, line) in lines {
            let (label, key) = line.split_once(' ').ok_or(KeyFileError::BadLine(n))?;
            let key = hex::decode(key.trim()).map_err(|_| KeyFileError::BadLine(n))?;
            dir.insert(label, key);
        }
        Ok(dir)
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
