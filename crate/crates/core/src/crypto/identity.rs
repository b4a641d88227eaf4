use std::collections::BTreeSet;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};

use super::aggregate::SignatureShare;
use super::hash::Digest;
use super::hex_array;
use crate::codec::{CodecError, Decode, Encode, Reader, Writer};

/// Opaque node identifier, unique within a run.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl Encode for NodeId {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.0);
    }
}

impl Decode for NodeId {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(NodeId(r.u32()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleHint {
    ProposerCapable,
    Pivot,
    Vehicle,
}

impl RoleHint {
    fn tag(self) -> u8 {
        match self {
            RoleHint::ProposerCapable => 0,
            RoleHint::Pivot => 1,
            RoleHint::Vehicle => 2,
        }
    }
}

/// Individual ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifyKey(#[serde(with = "hex_array")] pub [u8; 32]);

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vk:{}", &hex::encode(self.0)[..8])
    }
}

/// Individual ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature(#[serde(with = "hex_array")] pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{}", &hex::encode(self.0)[..8])
    }
}

impl Signature {
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        self.0[(bit / 8) % 64] ^= 1 << (bit % 8);
        self
    }
}

/// Transport endpoint handle.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetAddr(pub String);

impl NetAddr {
    pub fn sim(id: NodeId) -> Self {
        NetAddr(format!("sim://{}", id))
    }
}

/// Public identity of a participant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub node_id: NodeId,
    pub role_hint: RoleHint,
    pub verify_key: VerifyKey,
    pub net_addr: NetAddr,
}

impl Encode for Identity {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.node_id)
            .u8(self.role_hint.tag())
            .fixed(&self.verify_key.0)
            .str(&self.net_addr.0);
    }
}

impl Decode for Identity {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let node_id = r.get()?;
        let role_hint = match r.u8()? {
            0 => RoleHint::ProposerCapable,
            1 => RoleHint::Pivot,
            2 => RoleHint::Vehicle,
            _ => return Err(CodecError::Invalid("role hint")),
        };
        Ok(Identity {
            node_id,
            role_hint,
            verify_key: VerifyKey(r.fixed()?),
            net_addr: NetAddr(r.string()?),
        })
    }
}

/// Private signing key bound to one identity.
#[derive(Clone)]
pub struct IdentityKey {
    node_id: NodeId,
    signing: SigningKey,
}

impl fmt::Debug for IdentityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityKey")
            .field("node_id", &self.node_id)
            .finish_non_exhaustive()
    }
}

impl IdentityKey {
    pub fn from_seed(node_id: NodeId, seed: [u8; 32]) -> Self {
        Self {
            node_id,
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn verify_key(&self) -> VerifyKey {
        VerifyKey(self.signing.verifying_key().to_bytes())
    }

    pub fn identity(&self, role_hint: RoleHint) -> Identity {
        Identity {
            node_id: self.node_id,
            role_hint,
            verify_key: self.verify_key(),
            net_addr: NetAddr::sim(self.node_id),
        }
    }

    pub fn sign_raw(&self, digest: &Digest) -> Signature {
        Signature(self.signing.sign(digest.as_bytes()).to_bytes())
    }
}

/// One signer's endorsement of a digest: an individual signature any
/// participant can check, plus an optional booth share for aggregation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSignature {
    pub signer: NodeId,
    pub payload_digest: Digest,
    pub sig_bytes: Signature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share: Option<SignatureShare>,
}

impl PartialSignature {
    pub fn verify(&self, identity: &Identity) -> bool {
        identity.node_id == self.signer
            && verify_individual(&identity.verify_key, &self.payload_digest, &self.sig_bytes)
    }

    /// Same endorsement without the booth share (what outsiders retain).
    pub fn without_share(&self) -> Self {
        Self {
            share: None,
            ..self.clone()
        }
    }
}

impl Encode for PartialSignature {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.signer)
            .put(&self.payload_digest)
            .fixed(&self.sig_bytes.0);
        match &self.share {
            Some(share) => {
                w.u8(1).put(share);
            }
            None => {
                w.u8(0);
            }
        }
    }
}

impl Decode for PartialSignature {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let signer = r.get()?;
        let payload_digest = r.get()?;
        let sig_bytes = Signature(r.fixed()?);
        let share = match r.u8()? {
            0 => None,
            1 => Some(r.get()?),
            _ => return Err(CodecError::Invalid("share flag")),
        };
        Ok(Self {
            signer,
            payload_digest,
            sig_bytes,
            share,
        })
    }
}

/// Individual signature over a 256-bit digest.
pub fn sign(key: &IdentityKey, digest: &Digest) -> PartialSignature {
    PartialSignature {
        signer: key.node_id,
        payload_digest: *digest,
        sig_bytes: key.sign_raw(digest),
        share: None,
    }
}

pub fn verify_individual(key: &VerifyKey, digest: &Digest, sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify(digest.as_bytes(), &sig).is_ok()
}

/// Outsider check: at least `required` distinct signers each hold a valid
/// individual signature over `digest`.
pub fn verify_partial_set(
    entries: &[(PartialSignature, Identity)],
    digest: &Digest,
    required: usize,
) -> bool {
    let mut signers = BTreeSet::new();
    for (partial, identity) in entries {
        if partial.payload_digest != *digest || !partial.verify(identity) {
            return false;
        }
        signers.insert(partial.signer);
    }
    signers.len() >= required
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::HashAlg;

    fn key(id: u32) -> IdentityKey {
        IdentityKey::from_seed(NodeId(id), [id as u8 + 1; 32])
    }

    #[test]
    fn sign_then_verify_round_trip() {
        let k = key(1);
        let d = HashAlg::Sha256.digest(b"abc");
        let sig = sign(&k, &d);
        assert!(verify_individual(&k.verify_key(), &d, &sig.sig_bytes));
    }

    #[test]
    fn digest_mismatch_fails() {
        let k = key(1);
        let sig = sign(&k, &HashAlg::Sha256.digest(b"abc"));
        assert!(!verify_individual(
            &k.verify_key(),
            &HashAlg::Sha256.digest(b"abd"),
            &sig.sig_bytes
        ));
    }

    #[test]
    fn wrong_key_fails() {
        let d = HashAlg::Sha256.digest(b"abc");
        let sig = sign(&key(1), &d);
        assert!(!verify_individual(&key(2).verify_key(), &d, &sig.sig_bytes));
    }

    #[test]
    fn every_digest_bit_is_bound() {
        let k = key(3);
        let d = HashAlg::Sha256.digest(b"tuple");
        let sig = sign(&k, &d);
        for bit in 0..256 {
            assert!(!verify_individual(
                &k.verify_key(),
                &d.with_bit_flipped(bit),
                &sig.sig_bytes
            ));
        }
    }

    fn entries(ids: &[u32], d: &Digest) -> Vec<(PartialSignature, Identity)> {
        ids.iter()
            .map(|&i| {
                let k = key(i);
                (sign(&k, d), k.identity(RoleHint::Vehicle))
            })
            .collect()
    }

    #[test]
    fn partial_set_three_valid() {
        let d = HashAlg::Sha256.digest(b"r");
        assert!(verify_partial_set(&entries(&[1, 2, 3], &d), &d, 3));
    }

    #[test]
    fn partial_set_one_invalid_signature() {
        let d = HashAlg::Sha256.digest(b"r");
        let mut e = entries(&[1, 2, 3], &d);
        e[1].0.sig_bytes = e[1].0.sig_bytes.with_bit_flipped(5);
        assert!(!verify_partial_set(&e, &d, 3));
    }

    #[test]
    fn partial_set_requires_distinct_signers() {
        let d = HashAlg::Sha256.digest(b"r");
        let mut e = entries(&[1, 2], &d);
        e.push(e[0].clone());
        assert_eq!(e.len(), 3);
        assert!(!verify_partial_set(&e, &d, 3));
    }

    #[test]
    fn partial_signature_codec_round_trip() {
        let d = HashAlg::Sha256.digest(b"codec");
        let p = sign(&key(9), &d);
        assert_eq!(PartialSignature::from_bytes(p.to_bytes()).unwrap(), p);
        let id = key(9).identity(RoleHint::Pivot);
        assert_eq!(Identity::from_bytes(id.to_bytes()).unwrap(), id);
    }
}
