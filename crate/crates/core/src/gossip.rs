//! Post-commit dissemination along a propagation tree whose height is
//! bounded by a signed, strictly decreasing lifetime.
//!
//! Gossip never feeds back into ordering or consensus; a node's ledger is
//! the same whether or not it gossips.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booth::Directory;
use crate::codec::Encode;
use crate::crypto::{Digest, HashAlg, Identity, IdentityKey, NodeId, RoleHint};
use crate::engine::Ctx;
use crate::ledger::Transaction;
use crate::wire::{Commit, Envelope, Gossip, GossipAck, Message, TraverseEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GossipConfig {
    pub enabled: bool,
    /// Lifetime the proposer assigns; the tree height.
    pub lifetime: u32,
    pub fanout: usize,
    pub seen_capacity: usize,
}

impl Default for GossipConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lifetime: 3,
            fanout: 8,
            seen_capacity: 10_000,
        }
    }
}

/// Why a gossip message was dropped. Drops are silent on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum GossipDrop {
    #[error("already received")]
    Duplicate,
    #[error("commit hash or transaction does not match")]
    BadCommitHash,
    #[error("traverse chain does not start at the instance proposer")]
    ForeignRoot,
    #[error("traverse signature or identity invalid")]
    BadTraverseSig,
    #[error("lifetimes not strictly decreasing")]
    NonMonotoneLifetime,
    #[error("no lifetime left")]
    Expired,
}

impl GossipDrop {
    pub fn name(self) -> &'static str {
        match self {
            Self::Duplicate => "Duplicate",
            Self::BadCommitHash => "BadCommitHash",
            Self::ForeignRoot => "ForeignRoot",
            Self::BadTraverseSig => "BadTraverseSig",
            Self::NonMonotoneLifetime => "NonMonotoneLifetime",
            Self::Expired => "Expired",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("ack for a commit this node does not track")]
pub struct UnknownCommit;

pub fn commit_hash(alg: HashAlg, commit: &Commit) -> Digest {
    alg.digest(&commit.to_bytes())
}

pub fn traverse_digest(alg: HashAlg, commit_hash: &Digest, lifetime: u32) -> Digest {
    alg.tuple("vguard/traverse")
        .digest(commit_hash)
        .u64(lifetime as u64)
        .finish()
}

/// A message this node accepted and should keep in its gossiper store.
#[derive(Clone, Debug)]
pub struct Accepted {
    pub commit_hash: Digest,
    pub commit: Commit,
    pub tx: Arc<Transaction>,
    pub forwarded_to: usize,
}

/// Per-node gossip state: a bounded seen-set, propagator lists for commits
/// this node roots or registers, and the peer-sampling RNG.
pub struct GossipNode {
    config: GossipConfig,
    seen: LruCache<Digest, ()>,
    propagators: BTreeMap<Digest, BTreeMap<NodeId, Identity>>,
    rng: ChaCha8Rng,
}

impl GossipNode {
    pub fn new(config: GossipConfig, seed: u64) -> Self {
        let cap = NonZeroUsize::new(config.seen_capacity.max(1)).expect("non-zero");
        Self {
            config,
            seen: LruCache::new(cap),
            propagators: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &GossipConfig {
        &self.config
    }

    /// Propagators registered for `commit_hash`, if tracked.
    pub fn propagators(&self, commit_hash: &Digest) -> Option<&BTreeMap<NodeId, Identity>> {
        self.propagators.get(commit_hash)
    }

    /// Starts tracking acks for a commit (the pivot does this on commit).
    pub fn track(&mut self, commit_hash: Digest) {
        self.propagators.entry(commit_hash).or_default();
    }

    fn sample(&mut self, mut candidates: Vec<NodeId>) -> Vec<NodeId> {
        candidates.shuffle(&mut self.rng);
        candidates.truncate(self.config.fanout);
        candidates.sort();
        candidates
    }

    /// Roots a propagation tree for a commit this node proposed. Peers that
    /// took part in the commit's consensus are skipped.
    pub fn init(
        &mut self,
        ctx: &mut Ctx,
        key: &IdentityKey,
        me: Identity,
        instance: u32,
        commit: Commit,
        tx: Arc<Transaction>,
        consensus_members: &BTreeSet<NodeId>,
        peers: &[NodeId],
    ) -> Digest {
        let bytes = commit.to_bytes();
        ctx.charge_hash(bytes.len());
        let h = ctx.alg.digest(&bytes);
        self.track(h);
        self.seen.put(h, ());
        let lifetime = self.config.lifetime;
        if lifetime == 0 {
            return h;
        }
        let targets = self.sample(
            peers
                .iter()
                .copied()
                .filter(|p| *p != ctx.me && !consensus_members.contains(p))
                .collect(),
        );
        let sig = ctx.sign(key, &traverse_digest(ctx.alg, &h, lifetime));
        let msg = Gossip {
            commit,
            commit_hash: h,
            tx,
            traverse: vec![TraverseEntry {
                lifetime,
                sig,
                node: me,
            }],
        };
        ctx.send(targets, Envelope::new(instance, Message::Gossip(msg)));
        h
    }

    /// Verifies a received message, acks it to `notify` (the instance's
    /// proposer and pivot) and forwards it while lifetime remains.
    #[allow(clippy::too_many_arguments)]
    pub fn on_gossip(
        &mut self,
        ctx: &mut Ctx,
        key: &IdentityKey,
        directory: &Directory,
        instance: u32,
        root: NodeId,
        notify: &[NodeId],
        from: NodeId,
        mut msg: Gossip,
        peers: &[NodeId],
    ) -> Result<Accepted, GossipDrop> {
        if self.seen.contains(&msg.commit_hash) {
            return Err(GossipDrop::Duplicate);
        }
        let bytes = msg.commit.to_bytes();
        ctx.charge_hash(bytes.len() + msg.tx.entries.len() * 40 + msg.tx.links.len() * 64);
        if ctx.alg.digest(&bytes) != msg.commit_hash
            || msg.tx.tx_hash != msg.commit.tx_hash
            || msg.tx.window_start != msg.commit.ts
            || !msg.tx.hash_matches(ctx.alg)
        {
            return Err(GossipDrop::BadCommitHash);
        }
        match msg.traverse.first() {
            Some(e) if e.node.node_id == root => {}
            _ => return Err(GossipDrop::ForeignRoot),
        }
        for e in &msg.traverse {
            if directory.get(&e.node.node_id) != Some(&e.node) {
                return Err(GossipDrop::BadTraverseSig);
            }
            let d = traverse_digest(ctx.alg, &msg.commit_hash, e.lifetime);
            if !ctx.verify(&e.node.verify_key, &d, &e.sig) {
                return Err(GossipDrop::BadTraverseSig);
            }
        }
        if msg
            .traverse
            .windows(2)
            .any(|w| w[1].lifetime >= w[0].lifetime)
        {
            return Err(GossipDrop::NonMonotoneLifetime);
        }
        let lifetime_min = msg
            .traverse
            .iter()
            .map(|e| e.lifetime)
            .min()
            .expect("non-empty");
        if lifetime_min == 0 {
            return Err(GossipDrop::Expired);
        }

        self.seen.put(msg.commit_hash, ());
        let me = key.identity(RoleHint::Vehicle);
        let ack_to: Vec<NodeId> = notify
            .iter()
            .copied()
            .filter(|n| *n != ctx.me)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        ctx.send(
            ack_to,
            Envelope::new(
                instance,
                Message::GossipAck(GossipAck {
                    commit_hash: msg.commit_hash,
                    propagator: directory.get(&ctx.me).cloned().unwrap_or(me),
                }),
            ),
        );

        let next = lifetime_min - 1;
        let mut forwarded_to = 0;
        if next > 0 {
            let sig = ctx.sign(key, &traverse_digest(ctx.alg, &msg.commit_hash, next));
            let node = directory
                .get(&ctx.me)
                .cloned()
                .unwrap_or_else(|| key.identity(RoleHint::Vehicle));
            let targets = self.sample(
                peers
                    .iter()
                    .copied()
                    .filter(|p| *p != from && *p != ctx.me)
                    .collect(),
            );
            forwarded_to = targets.len();
            let mut fwd = msg.clone();
            fwd.traverse.push(TraverseEntry {
                lifetime: next,
                sig,
                node,
            });
            ctx.send(targets, Envelope::new(instance, Message::Gossip(fwd)));
        }
        msg.traverse.clear();
        Ok(Accepted {
            commit_hash: msg.commit_hash,
            commit: msg.commit,
            tx: msg.tx,
            forwarded_to,
        })
    }

    /// Registers a propagator. Returns whether the list grew.
    pub fn on_ack(&mut self, from: NodeId, ack: GossipAck) -> Result<bool, UnknownCommit> {
        let list = self
            .propagators
            .get_mut(&ack.commit_hash)
            .ok_or(UnknownCommit)?;
        if ack.propagator.node_id != from {
            return Ok(false);
        }
        Ok(list.insert(from, ack.propagator).is_none())
    }
}
