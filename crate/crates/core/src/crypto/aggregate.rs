//! Booth-scoped aggregate signatures.
//!
//! A dealer draws one BLS secret per booth member. Members sign the digest
//! with their share; the proposer sums the shares into a single G1 point and
//! records which signers contributed. Verification recomputes the summed
//! public key for exactly that signer set, so a certificate proves both
//! "at least t members signed" and "these particular members signed" while
//! staying a fixed 82 bytes regardless of booth size.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use bls12_381::{
    multi_miller_loop, G1Affine, G1Projective, G2Affine, G2Prepared, G2Projective, Gt, Scalar,
};
use group::Curve;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::hash::{Digest, HashAlg};
use super::hex_array;
use super::identity::{NodeId, PartialSignature};
use crate::codec::{CodecError, Decode, Encode, Reader, Writer};

const DST: &[u8] = b"BOOTH-AGG-BLS12381G1_XMD:SHA-256_SSWU_RO_";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("threshold {t} invalid for {n} members")]
    InvalidThreshold { t: usize, n: usize },
    #[error("partials cover more than one digest")]
    MixedDigests,
    #[error("signer {0} holds no share in this booth")]
    UnknownSigner(NodeId),
    #[error("signer {0} contributed twice")]
    DuplicateSigner(NodeId),
    #[error("partial from {0} carries no aggregatable share")]
    MissingShare(NodeId),
    #[error("share from {0} does not verify")]
    InvalidShare(NodeId),
    #[error("{have} partials, threshold is {need}")]
    InsufficientPartials { have: usize, need: usize },
}

/// One member's contribution to an aggregate, a compressed G1 point.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignatureShare(#[serde(with = "hex_array")] pub [u8; 48]);

impl fmt::Debug for SignatureShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "share:{}", &hex::encode(self.0)[..8])
    }
}

impl Encode for SignatureShare {
    fn encode(&self, w: &mut Writer) {
        w.fixed(&self.0);
    }
}

impl Decode for SignatureShare {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(SignatureShare(r.fixed()?))
    }
}

/// Quorum certificate: fixed size for any booth.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregateSignature {
    pub threshold: u16,
    #[serde(with = "hex_array")]
    pub sig_bytes: [u8; 48],
    pub signer_set_digest: Digest,
}

impl AggregateSignature {
    pub const ENCODED_LEN: usize = 2 + 48 + 32;
}

impl fmt::Debug for AggregateSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "agg(t={}, {}, signers={:?})",
            self.threshold,
            &hex::encode(self.sig_bytes)[..8],
            self.signer_set_digest
        )
    }
}

impl Encode for AggregateSignature {
    fn encode(&self, w: &mut Writer) {
        w.u16(self.threshold)
            .fixed(&self.sig_bytes)
            .put(&self.signer_set_digest);
    }
}

impl Decode for AggregateSignature {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            threshold: r.u16()?,
            sig_bytes: r.fixed()?,
            signer_set_digest: r.get()?,
        })
    }
}

/// Booth-wide verification key: the threshold and every member's public
/// share key, in member order.
#[derive(Clone, Serialize, Deserialize)]
pub struct BoothVerifyKey {
    pub threshold: u16,
    pub alg: HashAlg,
    #[serde(with = "member_keys")]
    pub member_keys: BTreeMap<NodeId, [u8; 96]>,
    #[serde(skip)]
    decoded: OnceLock<Option<BTreeMap<NodeId, G2Affine>>>,
    #[serde(skip)]
    fingerprint: OnceLock<Digest>,
}

impl PartialEq for BoothVerifyKey {
    fn eq(&self, other: &Self) -> bool {
        self.threshold == other.threshold
            && self.alg == other.alg
            && self.member_keys == other.member_keys
    }
}

impl Eq for BoothVerifyKey {}

impl fmt::Debug for BoothVerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoothVerifyKey")
            .field("threshold", &self.threshold)
            .field("members", &self.member_keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl BoothVerifyKey {
    pub fn new(threshold: u16, alg: HashAlg, member_keys: BTreeMap<NodeId, [u8; 96]>) -> Self {
        Self {
            threshold,
            alg,
            member_keys,
            decoded: OnceLock::new(),
            fingerprint: OnceLock::new(),
        }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.member_keys.contains_key(&id)
    }

    fn points(&self) -> Option<&BTreeMap<NodeId, G2Affine>> {
        self.decoded
            .get_or_init(|| {
                self.member_keys
                    .iter()
                    .map(|(id, raw)| Option::from(G2Affine::from_compressed(raw)).map(|p| (*id, p)))
                    .collect()
            })
            .as_ref()
    }

    /// Digest identifying the key material itself.
    pub fn fingerprint(&self) -> Digest {
        self.alg.tuple("booth-verify-key").encoded(self).finish()
    }

    pub(crate) fn fingerprint_cached(&self) -> Digest {
        *self.fingerprint.get_or_init(|| self.fingerprint())
    }

    /// Digest of a signer set, order-insensitive.
    pub fn signer_set_digest<'a>(&self, signers: impl IntoIterator<Item = &'a NodeId>) -> Digest {
        let sorted: BTreeSet<NodeId> = signers.into_iter().copied().collect();
        let mut h = self.alg.tuple("signer-set");
        for id in sorted {
            h = h.u64(id.0 as u64);
        }
        h.finish()
    }
}

impl Encode for BoothVerifyKey {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.alg)
            .u16(self.threshold)
            .len(self.member_keys.len());
        for (id, key) in &self.member_keys {
            w.put(id).fixed(key);
        }
    }
}

impl Decode for BoothVerifyKey {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let alg = r.get()?;
        let threshold = r.u16()?;
        let n = r.len()?;
        let mut member_keys = BTreeMap::new();
        for _ in 0..n {
            let id: NodeId = r.get()?;
            if member_keys.insert(id, r.fixed()?).is_some() {
                return Err(CodecError::Invalid("duplicate booth member key"));
            }
        }
        Ok(Self::new(threshold, alg, member_keys))
    }
}

/// A member's secret share.
#[derive(Clone)]
pub struct ShareKey {
    pub owner: NodeId,
    secret: Scalar,
}

impl fmt::Debug for ShareKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShareKey")
            .field("owner", &self.owner)
            .finish_non_exhaustive()
    }
}

impl ShareKey {
    pub fn sign(&self, digest: &Digest) -> SignatureShare {
        let point = hash_to_g1(digest) * self.secret;
        SignatureShare(point.to_affine().to_compressed())
    }
}

/// Output of the dealer: the public key plus one share per member.
#[derive(Clone, Debug)]
pub struct BoothKeyMaterial {
    pub booth_id: Digest,
    pub verify_key: BoothVerifyKey,
    pub shares: BTreeMap<NodeId, ShareKey>,
}

/// Trusted-dealer setup for a booth of `members` with threshold `t`.
pub fn setup_booth_keys(
    members: &[NodeId],
    t: usize,
    alg: HashAlg,
    rng: &mut impl RngCore,
) -> Result<BoothKeyMaterial, AggregateError> {
    let n = members.len();
    let f = n.saturating_sub(1) / 3;
    let distinct: BTreeSet<_> = members.iter().collect();
    if n == 0 || distinct.len() != n || t == 0 || t > n || t < 2 * f || t > u16::MAX as usize {
        return Err(AggregateError::InvalidThreshold { t, n });
    }
    let mut shares = BTreeMap::new();
    let mut member_keys = BTreeMap::new();
    for &id in members {
        let mut wide = [0u8; 64];
        rng.fill_bytes(&mut wide);
        let secret = Scalar::from_bytes_wide(&wide);
        let public = (G2Projective::generator() * secret).to_affine();
        member_keys.insert(id, public.to_compressed());
        shares.insert(id, ShareKey { owner: id, secret });
    }
    let verify_key = BoothVerifyKey::new(t as u16, alg, member_keys);
    Ok(BoothKeyMaterial {
        booth_id: verify_key.fingerprint(),
        verify_key,
        shares,
    })
}

fn hash_to_g1(digest: &Digest) -> G1Projective {
    <G1Projective as HashToCurve<ExpandMsgXmd<sha2_09::Sha256>>>::hash_to_curve(
        digest.as_bytes(),
        DST,
    )
}

fn pairing_check(sig: &G1Affine, msg: &G1Affine, key: &G2Affine) -> bool {
    let neg_gen = G2Prepared::from(-G2Affine::generator());
    let key = G2Prepared::from(*key);
    multi_miller_loop(&[(sig, &neg_gen), (msg, &key)]).final_exponentiation() == Gt::identity()
}

fn decode_share(share: &SignatureShare) -> Option<G1Affine> {
    Option::from(G1Affine::from_compressed(&share.0))
}

fn verify_share(
    key: &BoothVerifyKey,
    signer: NodeId,
    digest: &Digest,
    share: &SignatureShare,
) -> bool {
    let (Some(points), Some(sig)) = (key.points(), decode_share(share)) else {
        return false;
    };
    let Some(pk) = points.get(&signer) else {
        return false;
    };
    pairing_check(&sig, &hash_to_g1(digest).to_affine(), pk)
}

/// Combine partials into a certificate. Checks the sum once and only falls
/// back to per-share checks to name a bad contributor.
pub fn aggregate(
    partials: &[PartialSignature],
    key: &BoothVerifyKey,
) -> Result<AggregateSignature, AggregateError> {
    let need = key.threshold as usize;
    let Some(first) = partials.first() else {
        return Err(AggregateError::InsufficientPartials { have: 0, need });
    };
    let digest = first.payload_digest;
    let mut seen = BTreeSet::new();
    let mut sum = G1Projective::identity();
    for p in partials {
        if p.payload_digest != digest {
            return Err(AggregateError::MixedDigests);
        }
        if !key.contains(p.signer) {
            return Err(AggregateError::UnknownSigner(p.signer));
        }
        if !seen.insert(p.signer) {
            return Err(AggregateError::DuplicateSigner(p.signer));
        }
        let share = p
            .share
            .as_ref()
            .ok_or(AggregateError::MissingShare(p.signer))?;
        let point = decode_share(share).ok_or(AggregateError::InvalidShare(p.signer))?;
        sum += point;
    }
    if seen.len() < need {
        return Err(AggregateError::InsufficientPartials {
            have: seen.len(),
            need,
        });
    }
    let agg = AggregateSignature {
        threshold: key.threshold,
        sig_bytes: sum.to_affine().to_compressed(),
        signer_set_digest: key.signer_set_digest(&seen),
    };
    if verify_aggregate(&agg, &digest, key, &seen) {
        return Ok(agg);
    }
    for p in partials {
        if !verify_share(
            key,
            p.signer,
            &digest,
            p.share.as_ref().expect("checked above"),
        ) {
            return Err(AggregateError::InvalidShare(p.signer));
        }
    }
    unreachable!("aggregate of individually valid shares must verify")
}

/// True iff `agg` is the sum of valid shares over `digest` from exactly
/// `signers`, all members of the booth, with at least `threshold` of them.
pub fn verify_aggregate(
    agg: &AggregateSignature,
    digest: &Digest,
    key: &BoothVerifyKey,
    signers: &BTreeSet<NodeId>,
) -> bool {
    if agg.threshold != key.threshold || signers.len() < key.threshold as usize {
        return false;
    }
    if agg.signer_set_digest != key.signer_set_digest(signers) {
        return false;
    }
    let Some(points) = key.points() else {
        return false;
    };
    let mut sum = G2Projective::identity();
    for id in signers {
        match points.get(id) {
            Some(pk) => sum += pk,
            None => return false,
        }
    }
    let Some(sig) = decode_share(&SignatureShare(agg.sig_bytes)) else {
        return false;
    };
    pairing_check(&sig, &hash_to_g1(digest).to_affine(), &sum.to_affine())
}

mod member_keys {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        keys: &BTreeMap<NodeId, [u8; 96]>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let as_hex: BTreeMap<u32, String> =
            keys.iter().map(|(id, k)| (id.0, hex::encode(k))).collect();
        as_hex.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<NodeId, [u8; 96]>, D::Error> {
        let as_hex = BTreeMap::<u32, String>::deserialize(d)?;
        as_hex
            .into_iter()
            .map(|(id, k)| {
                let raw = hex::decode(&k).map_err(serde::de::Error::custom)?;
                let arr: [u8; 96] = raw
                    .try_into()
                    .map_err(|_| serde::de::Error::custom("member key must be 96 bytes"))?;
                Ok((NodeId(id), arr))
            })
            .collect()
    }
}
