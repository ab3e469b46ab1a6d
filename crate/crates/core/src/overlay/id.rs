use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bits per routing digit.
pub const DIGIT_BITS: u32 = 4;
/// Number of base-16 digits in an identifier.
pub const DIGITS: usize = 32;
/// Number of distinct digit values (columns of a routing table row).
pub const RADIX: usize = 16;

/// A 128-bit identifier on the circular id space `[0, 2^128)`.
///
/// Rendered as 32 lowercase hex digits. Digit 0 is the most significant
/// nibble, which is the order prefix routing consumes digits in.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NodeId(pub u128);

impl NodeId {
    pub const ZERO: NodeId = NodeId(0);
    pub const MAX: NodeId = NodeId(u128::MAX);

    /// Draws a uniformly distributed id.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        NodeId(rng.random())
    }

    /// Digest of a textual name: the first 16 bytes of its SHA-256, big-endian.
    pub fn from_name(name: &str) -> Result<Self> {
        if name.is_empty() {
            return Err(Error::invalid("identifier name must be non-empty"));
        }
        let digest = Sha256::digest(name.as_bytes());
        let mut bytes = [0u8; 16];
        bytes.copy_from_slice(&digest[..16]);
        Ok(NodeId(u128::from_be_bytes(bytes)))
    }

    /// The base-16 digit at position `index` (0 = most significant).
    #[inline]
    pub fn digit(self, index: usize) -> usize {
        debug_assert!(index < DIGITS);
        ((self.0 >> (124 - 4 * index as u32)) & 0xF) as usize
    }

    /// Number of leading hex digits shared with `other`, in `[0, 32]`.
    #[inline]
    pub fn shared_prefix_len(self, other: NodeId) -> usize {
        ((self.0 ^ other.0).leading_zeros() / DIGIT_BITS) as usize
    }

    /// Circular distance `min(|a - b|, 2^128 - |a - b|)`.
    #[inline]
    pub fn distance(self, other: NodeId) -> u128 {
        let d = self.0.wrapping_sub(other.0);
        d.min(d.wrapping_neg())
    }

    /// Clockwise distance from `self` to `other`.
    #[inline]
    pub fn cw_distance(self, other: NodeId) -> u128 {
        other.0.wrapping_sub(self.0)
    }

    /// Counter-clockwise distance from `self` to `other`.
    #[inline]
    pub fn ccw_distance(self, other: NodeId) -> u128 {
        self.0.wrapping_sub(other.0)
    }

    /// True when `a` is strictly closer to `self` than `b`, with the
    /// numerically smaller id winning exact ties.
    #[inline]
    pub fn prefers(self, a: NodeId, b: NodeId) -> bool {
        (self.distance(a), a) < (self.distance(b), b)
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }
}

/// Same as [`NodeId::from_name`].
pub fn id_from_name(name: &str) -> Result<NodeId> {
    NodeId::from_name(name)
}

/// Same as [`NodeId::shared_prefix_len`].
pub fn shared_prefix_len(a: NodeId, b: NodeId) -> usize {
    a.shared_prefix_len(b)
}

/// The node among `candidates` closest to `key` (ties to the smaller id).
pub fn closest<I: IntoIterator<Item = NodeId>>(key: NodeId, candidates: I) -> Option<NodeId> {
    candidates.into_iter().min_by_key(|id| (key.distance(*id), *id))
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // short form keeps traces readable
        write!(f, "NodeId({:08x}..)", (self.0 >> 96) as u32)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != DIGITS || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(Error::invalid(format!("not a 32-digit lowercase hex id: {s:?}")));
        }
        u128::from_str_radix(s, 16)
            .map(NodeId)
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.to_hex()
    }
}

impl TryFrom<String> for NodeId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
