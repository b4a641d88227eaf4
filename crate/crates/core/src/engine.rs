//! Handler context shared by every protocol state machine.
//!
//! Handlers never touch the network or clock directly. They read `now`,
//! charge modeled CPU cost, and queue outgoing messages and timers; the
//! driver (simulator or threaded runtime) applies those effects.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::crypto::{
    AggregateSignature, BoothVerifyKey, Digest, HashAlg, IdentityKey, NodeId, PartialSignature,
    ShareKey, Signature, VerifyCache, VerifyKey,
};
use crate::time::SimTime;
use crate::wire::Envelope;

/// Independent per-node resource lane; each has its own CPU and egress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lane {
    Ordering,
    Consensus,
    Control,
    Gossip,
}

impl Lane {
    pub const ALL: [Lane; 4] = [Lane::Ordering, Lane::Consensus, Lane::Control, Lane::Gossip];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timer {
    NextBatch {
        instance: u32,
    },
    /// Re-offers batches that were parked waiting for an ordering booth.
    ResumeWaiting {
        instance: u32,
    },
    OrderingTimeout {
        instance: u32,
        id: u64,
    },
    WindowTick {
        instance: u32,
        window: u64,
    },
    ConsensusTimeout {
        instance: u32,
        ts: SimTime,
        attempt: u32,
    },
    PingTick,
    StorageCleanup,
    /// Deferred gossip work for a committed window, run on the gossip lane.
    GossipStart {
        instance: u32,
        ts: SimTime,
    },
}

impl Timer {
    pub fn lane(&self) -> Lane {
        match self {
            Timer::NextBatch { .. }
            | Timer::ResumeWaiting { .. }
            | Timer::OrderingTimeout { .. } => Lane::Ordering,
            Timer::WindowTick { .. } | Timer::ConsensusTimeout { .. } => Lane::Consensus,
            Timer::PingTick | Timer::StorageCleanup => Lane::Control,
            Timer::GossipStart { .. } => Lane::Gossip,
        }
    }
}

/// One message with its recipients, sent in recipient order.
#[derive(Clone, Debug)]
pub struct Outgoing {
    pub to: Vec<NodeId>,
    pub envelope: Envelope,
}

pub struct Ctx<'a> {
    pub now: SimTime,
    pub me: NodeId,
    pub alg: HashAlg,
    pub cost: &'a CostModel,
    pub cache: &'a VerifyCache,
    /// Time until this lane's egress link drains, as of `now`.
    pub egress_backlog: SimTime,
    charged: SimTime,
    out: Vec<Outgoing>,
    timers: Vec<(SimTime, Timer)>,
}

impl<'a> Ctx<'a> {
    pub fn new(
        now: SimTime,
        me: NodeId,
        alg: HashAlg,
        cost: &'a CostModel,
        cache: &'a VerifyCache,
    ) -> Self {
        Self {
            now,
            me,
            alg,
            cost,
            cache,
            egress_backlog: 0,
            charged: 0,
            out: Vec::new(),
            timers: Vec::new(),
        }
    }

    pub fn charge(&mut self, ns: SimTime) {
        self.charged += ns;
    }

    pub fn charge_hash(&mut self, bytes: usize) {
        self.charged += self.cost.hash(bytes);
    }

    pub fn charge_codec(&mut self, bytes: usize) {
        self.charged += self.cost.codec(bytes);
    }

    pub fn charged(&self) -> SimTime {
        self.charged
    }

    /// Time at which work charged so far completes.
    pub fn finish_time(&self) -> SimTime {
        self.now + self.charged
    }

    pub fn send(&mut self, to: Vec<NodeId>, envelope: Envelope) {
        if to.is_empty() {
            return;
        }
        self.charged += self.cost.send_overhead_ns * to.len() as SimTime;
        self.out.push(Outgoing { to, envelope });
    }

    /// Fires `after` nanoseconds past the start of this handler.
    pub fn set_timer(&mut self, after: SimTime, timer: Timer) {
        self.timers.push((after, timer));
    }

    pub fn sign(&mut self, key: &IdentityKey, digest: &Digest) -> Signature {
        self.charged += self.cost.sign_ns;
        key.sign_raw(digest)
    }

    /// Individual signature plus, when the signer holds one, a booth share.
    pub fn endorse(
        &mut self,
        key: &IdentityKey,
        share: Option<&ShareKey>,
        digest: &Digest,
    ) -> PartialSignature {
        let mut partial = PartialSignature {
            signer: key.node_id(),
            payload_digest: *digest,
            sig_bytes: self.sign(key, digest),
            share: None,
        };
        if let Some(share) = share {
            self.charged += self.cost.share_sign_ns;
            partial.share = Some(share.sign(digest));
        }
        partial
    }

    pub fn verify(&mut self, key: &VerifyKey, digest: &Digest, sig: &Signature) -> bool {
        self.charged += self.cost.verify_ns;
        self.cache.individual(key, digest, sig)
    }

    pub fn verify_aggregate(
        &mut self,
        agg: &AggregateSignature,
        digest: &Digest,
        key: &BoothVerifyKey,
        signers: &BTreeSet<NodeId>,
    ) -> bool {
        self.charged += self.cost.aggregate_verify_ns;
        self.cache.aggregate(agg, digest, key, signers)
    }

    pub fn into_effects(self) -> Effects {
        Effects {
            charged: self.charged,
            out: self.out,
            timers: self.timers,
        }
    }
}

/// Everything a handler asked for, applied by the driver.
#[derive(Debug, Default)]
pub struct Effects {
    pub charged: SimTime,
    pub out: Vec<Outgoing>,
    pub timers: Vec<(SimTime, Timer)>,
}

/// Named diagnostic counters (rejects, drops, alarms).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters(pub BTreeMap<String, u64>);

impl Counters {
    pub fn bump(&mut self, name: impl Into<String>) {
        *self.0.entry(name.into()).or_default() += 1;
    }

    pub fn get(&self, name: &str) -> u64 {
        self.0.get(name).copied().unwrap_or(0)
    }

    /// Sum of all counters whose name starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn merge(&mut self, other: &Counters) {
        for (k, v) in &other.0 {
            *self.0.entry(k.clone()).or_default() += v;
        }
    }
}
