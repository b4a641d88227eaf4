use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{BoothVerifyKey, Digest, HashAlg, Identity, NodeId};
use crate::time::SimTime;

/// Sorted set of validator ids that endorsed a certificate.
pub type Quorum = BTreeSet<NodeId>;

/// Every participant's public identity, known to all nodes in advance.
pub type Directory = BTreeMap<NodeId, Identity>;

/// A membership configuration profile: the exact node set responsible for
/// one ordering or consensus instance, with its aggregate verification key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Booth {
    pub booth_hash: Digest,
    pub proposer: NodeId,
    pub pivot: NodeId,
    pub members: Vec<Identity>,
    pub verify_key: BoothVerifyKey,
    pub created_at: SimTime,
}

impl Booth {
    /// Builds a booth and computes its hash. `members` must include both
    /// the proposer and the pivot; it is kept sorted by node id.
    pub fn new(
        proposer: NodeId,
        pivot: NodeId,
        mut members: Vec<Identity>,
        verify_key: BoothVerifyKey,
        created_at: SimTime,
    ) -> Self {
        members.sort_by_key(|m| m.node_id);
        let booth_hash = Self::compute_hash(proposer, pivot, &members, &verify_key);
        Self {
            booth_hash,
            proposer,
            pivot,
            members,
            verify_key,
            created_at,
        }
    }

    pub fn compute_hash(
        proposer: NodeId,
        pivot: NodeId,
        members: &[Identity],
        verify_key: &BoothVerifyKey,
    ) -> Digest {
        let mut h = verify_key
            .alg
            .tuple("booth")
            .encoded(&proposer)
            .encoded(&pivot);
        for m in members {
            h = h.encoded(m);
        }
        h.encoded(verify_key).finish()
    }

    /// Recomputes the hash from the profile's contents.
    pub fn hash_matches(&self) -> bool {
        Self::compute_hash(self.proposer, self.pivot, &self.members, &self.verify_key)
            == self.booth_hash
    }

    pub fn alg(&self) -> HashAlg {
        self.verify_key.alg
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Fault tolerance of this booth: `⌊(n−1)/3⌋`.
    pub fn f(&self) -> usize {
        (self.members.len().saturating_sub(1)) / 3
    }

    pub fn quorum_size(&self) -> usize {
        2 * self.f()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.member(id).is_some()
    }

    pub fn member(&self, id: NodeId) -> Option<&Identity> {
        self.members
            .binary_search_by_key(&id, |m| m.node_id)
            .ok()
            .map(|i| &self.members[i])
    }

    pub fn member_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.iter().map(|m| m.node_id)
    }

    /// Every member other than the proposer.
    pub fn validators(&self) -> impl Iterator<Item = NodeId> + '_ {
        let proposer = self.proposer;
        self.member_ids().filter(move |id| *id != proposer)
    }

    pub fn member_set(&self) -> BTreeSet<NodeId> {
        self.member_ids().collect()
    }

    /// Structural check a validator applies before trusting a presented
    /// booth: `3f+1` members including proposer and pivot, threshold `2f`,
    /// one key per member, and identities matching the directory.
    pub fn well_formed(&self, f: usize, directory: &Directory) -> bool {
        self.size() == 3 * f + 1
            && self.verify_key.threshold as usize == 2 * f
            && self.proposer != self.pivot
            && self.contains(self.proposer)
            && self.contains(self.pivot)
            && self.verify_key.member_keys.len() == self.size()
            && self.members.iter().all(|m| {
                self.verify_key.contains(m.node_id) && directory.get(&m.node_id) == Some(m)
            })
    }
}

impl Encode for Booth {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.proposer)
            .put(&self.pivot)
            .seq(&self.members)
            .put(&self.verify_key)
            .u64(self.created_at);
    }
}

/// Decoding recomputes the hash; the caller compares it with any claimed
/// hash carried alongside.
impl Decode for Booth {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let proposer = r.get()?;
        let pivot = r.get()?;
        let members: Vec<Identity> = r.seq()?;
        if members.windows(2).any(|w| w[0].node_id >= w[1].node_id) {
            return Err(CodecError::Invalid("booth members not sorted"));
        }
        let verify_key = r.get()?;
        let created_at = r.u64()?;
        Ok(Booth::new(proposer, pivot, members, verify_key, created_at))
    }
}

/// Booth profiles known to a node, keyed by hash.
#[derive(Clone, Debug, Default)]
pub struct BoothBook {
    booths: std::collections::BTreeMap<Digest, Arc<Booth>>,
}

impl BoothBook {
    /// Returns the canonical shared copy, so decoded keys are cached once.
    pub fn intern(&mut self, booth: Booth) -> Arc<Booth> {
        self.booths
            .entry(booth.booth_hash)
            .or_insert_with(|| Arc::new(booth))
            .clone()
    }

    pub fn insert(&mut self, booth: Arc<Booth>) -> Arc<Booth> {
        self.booths.entry(booth.booth_hash).or_insert(booth).clone()
    }

    pub fn get(&self, hash: &Digest) -> Option<&Arc<Booth>> {
        self.booths.get(hash)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Booth>> {
        self.booths.values()
    }

    pub fn len(&self) -> usize {
        self.booths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.booths.is_empty()
    }

    pub fn contains(&self, hash: &Digest) -> bool {
        self.booths.contains_key(hash)
    }
}
