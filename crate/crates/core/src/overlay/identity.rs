use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// 256-bit node identity, the fingerprint of a locally generated keypair.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId([u8; 32]);

impl NodeId {
    /// Reserved identity standing for currency creation and destruction in
    /// the transfer log. Never produced by [`generate_identity`] in practice.
    pub const TREASURY: NodeId = NodeId([0u8; 32]);

    pub const BITS: usize = 256;

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        NodeId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Identity for an account that is not a network node (service developers).
    pub fn for_account(label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"c3sim/account");
        h.update(label.as_bytes());
        NodeId(h.finalize().into())
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.short())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for NodeId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(NodeId(out))
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draw a private key from `rng`, derive the public key and return its hash.
///
/// No signatures are ever checked in the simulator; only the uniqueness of
/// the resulting identifier matters.
pub fn generate_identity<R: RngCore>(rng: &mut R) -> NodeId {
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    let public: [u8; 32] = Sha256::new()
        .chain_update(b"c3sim/pk")
        .chain_update(secret)
        .finalize()
        .into();
    NodeId(
        Sha256::new()
            .chain_update(b"c3sim/id")
            .chain_update(public)
            .finalize()
            .into(),
    )
}

/// Hash over the sorted identities of a node's current neighbours.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PositionFingerprint([u8; 32]);

impl PositionFingerprint {
    pub fn of(neighbors: &BTreeSet<NodeId>) -> Self {
        let mut h = Sha256::new();
        h.update(b"c3sim/position");
        for n in neighbors {
            h.update(n.as_bytes());
        }
        PositionFingerprint(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for PositionFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", hex::encode(&self.0[..4]))
    }
}
