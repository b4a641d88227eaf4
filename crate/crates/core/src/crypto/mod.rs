//! Identities, hashing, individual signatures and booth aggregate signatures.

pub mod aggregate;
pub mod cache;
pub mod hash;
pub mod identity;

pub use aggregate::{
    aggregate, setup_booth_keys, verify_aggregate, AggregateError, AggregateSignature,
    BoothKeyMaterial, BoothVerifyKey, ShareKey, SignatureShare,
};
pub use cache::VerifyCache;
pub use hash::{Digest, HashAlg, TupleHasher};
pub use identity::{
    sign, verify_individual, verify_partial_set, Identity, IdentityKey, NetAddr, NodeId,
    PartialSignature, RoleHint, Signature, VerifyKey,
};

/// Serde adapter writing fixed-size byte arrays as hex strings.
pub(crate) mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        d: D,
    ) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let raw = hex::decode(&s).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes")))
    }
}
