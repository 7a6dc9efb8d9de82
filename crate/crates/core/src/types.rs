//! Identifiers, money and time shared by every module.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Monetary value in minor units.
pub type Amount = i64;

/// Logical simulation time.
pub type Tick = u64;

/// Open end of a valid-time interval.
pub const FOREVER: Tick = Tick::MAX;

/// Unique participant identifier handed out at enrollment.
///
/// Id 0 is reserved for the Currency Manager's issuance desk, which takes
/// part in issuance and redemption as an ordinary peer.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl ClientId {
    pub const TREASURY: ClientId = ClientId(0);

    pub fn is_treasury(self) -> bool {
        self == Self::TREASURY
    }

    /// Label under which this participant's signing key is registered.
    pub fn signer_label(self) -> String {
        if self.is_treasury() {
            crate::signature::CURRENCY_MANAGER.to_string()
        } else {
            format!("client:{}", self.0)
        }
    }

    pub fn to_be_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ClientId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(ClientId)
    }
}

/// Unordered pair of distinct clients, stored low id first. Serializes as
/// `"lo:hi"` so it can key JSON maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairKey {
    lo: ClientId,
    hi: ClientId,
}

impl PairKey {
    /// Returns `None` when both ids are equal.
    pub fn new(a: ClientId, b: ClientId) -> Option<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(PairKey { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Some(PairKey { lo: b, hi: a }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn lo(&self) -> ClientId {
        self.lo
    }

    pub fn hi(&self) -> ClientId {
        self.hi
    }

    pub fn contains(&self, id: ClientId) -> bool {
        self.lo == id || self.hi == id
    }

    /// The other member of the pair, if `id` belongs to it.
    pub fn other(&self, id: ClientId) -> Option<ClientId> {
        if id == self.lo {
            Some(self.hi)
        } else if id == self.hi {
            Some(self.lo)
        } else {
            None
        }
    }

    pub fn involves_treasury(&self) -> bool {
        self.lo.is_treasury()
    }
}

impl Serialize for PairKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PairKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid pair `{0}`: expected two distinct ids as `a:b`")]
pub struct ParsePairError(pub String);

impl FromStr for PairKey {
    type Err = ParsePairError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParsePairError(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(err)?;
        let a: ClientId = a.parse().map_err(|_| err())?;
        let b: ClientId = b.parse().map_err(|_| err())?;
        PairKey::new(a, b).ok_or_else(err)
    }
}

/// Maps with structured keys as `[key, value]` lists, for JSON.
pub(crate) mod map_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        map: &BTreeMap<K, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Display mapping from ticks to wall-clock style labels.
///
/// A label applies from its tick until the next labelled tick, so a scenario
/// can say "everything from tick 20 on happens on May 18 3 PM".
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeLabels(BTreeMap<Tick, String>);

impl TimeLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, from: Tick, label: impl Into<String>) {
        self.0.insert(from, label.into());
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tick, &String)> {
        self.0.iter()
    }

    pub fn display(&self, tick: Tick) -> String {
        if tick == FOREVER {
            return "∞".to_string();
        }
        match self.0.range(..=tick).next_back() {
            Some((_, label)) => label.clone(),
            None => tick.to_string(),
        }
    }
}
