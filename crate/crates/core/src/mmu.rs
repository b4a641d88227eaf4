//! Membership management: tracks node availability and serves valid booths.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booth::Booth;
use crate::crypto::{
    setup_booth_keys, BoothVerifyKey, Digest, HashAlg, Identity, NodeId, ShareKey,
};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmuError {
    #[error("{available} nodes available, booths need {needed}")]
    InsufficientMembers { available: usize, needed: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BoothKind {
    Ordering,
    Consensus,
}

/// Whether consensus shares the ordering booth or deliberately uses another.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoothPolicy {
    #[default]
    Shared,
    SplitConsensus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MmuConfig {
    pub f: usize,
    pub queue_depth: usize,
    pub ewma_alpha: f64,
    pub missed_pings_down: u32,
    pub policy: BoothPolicy,
}

impl MmuConfig {
    pub fn new(f: usize) -> Self {
        Self {
            f,
            queue_depth: 4,
            ewma_alpha: 0.2,
            missed_pings_down: 3,
            policy: BoothPolicy::Shared,
        }
    }

    pub fn booth_size(&self) -> usize {
        3 * self.f + 1
    }
}

#[derive(Clone, Debug, Default)]
pub struct NodeHealth {
    pub up: bool,
    pub rtt_ewma: Option<f64>,
    pub last_ping_latency: Option<SimTime>,
    pub missed: u32,
}

/// Trusted dealer: generates per-booth key material and installs each
/// member's share into that member's keystore out of band.
#[derive(Debug, Default)]
pub struct Dealer {
    keystores: Mutex<BTreeMap<(NodeId, Digest), ShareKey>>,
}

impl Dealer {
    pub fn new() -> Self {
        Self::default()
    }

    fn install(&self, booth_key: Digest, shares: impl IntoIterator<Item = ShareKey>) {
        let mut ks = self.keystores.lock().expect("dealer poisoned");
        for share in shares {
            ks.insert((share.owner, booth_key), share);
        }
    }

    /// The share `node` holds for the booth with verify key `key`.
    pub fn share_for(&self, node: NodeId, key: &BoothVerifyKey) -> Option<ShareKey> {
        self.keystores
            .lock()
            .expect("dealer poisoned")
            .get(&(node, key.fingerprint_cached()))
            .cloned()
    }
}

/// One membership management unit, owned by a proposer instance.
#[derive(Debug)]
pub struct Mmu {
    config: MmuConfig,
    instance: u32,
    seed: u64,
    alg: HashAlg,
    proposer: NodeId,
    pivot: NodeId,
    directory: BTreeMap<NodeId, Identity>,
    health: BTreeMap<NodeId, NodeHealth>,
    queue: Vec<Arc<Booth>>,
    ordering: Option<Arc<Booth>>,
    consensus: Option<Arc<Booth>>,
    booths_by_members: BTreeMap<Vec<NodeId>, Arc<Booth>>,
    dealer: Arc<Dealer>,
    served: BTreeSet<Digest>,
}

impl Mmu {
    /// `nodes` is every identity this instance may draw members from,
    /// including its proposer and pivot; all start as available.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: MmuConfig,
        instance: u32,
        seed: u64,
        alg: HashAlg,
        proposer: NodeId,
        pivot: NodeId,
        nodes: impl IntoIterator<Item = Identity>,
        dealer: Arc<Dealer>,
    ) -> Self {
        let directory: BTreeMap<NodeId, Identity> =
            nodes.into_iter().map(|i| (i.node_id, i)).collect();
        let health = directory
            .keys()
            .map(|id| {
                (
                    *id,
                    NodeHealth {
                        up: true,
                        ..NodeHealth::default()
                    },
                )
            })
            .collect();
        Self {
            config,
            instance,
            seed,
            alg,
            proposer,
            pivot,
            directory,
            health,
            queue: Vec::new(),
            ordering: None,
            consensus: None,
            booths_by_members: BTreeMap::new(),
            dealer,
            served: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &MmuConfig {
        &self.config
    }

    pub fn proposer(&self) -> NodeId {
        self.proposer
    }

    pub fn pivot(&self) -> NodeId {
        self.pivot
    }

    pub fn queue(&self) -> &[Arc<Booth>] {
        &self.queue
    }

    pub fn health(&self, id: NodeId) -> Option<&NodeHealth> {
        self.health.get(&id)
    }

    pub fn is_up(&self, id: NodeId) -> bool {
        self.health.get(&id).is_some_and(|h| h.up)
    }

    /// Hashes of every booth handed out so far.
    pub fn served(&self) -> &BTreeSet<Digest> {
        &self.served
    }

    /// Rebuilds the queue from currently available nodes.
    pub fn compose_booths(&mut self, now: SimTime) -> Result<(), MmuError> {
        let needed = self.config.booth_size();
        let available = self.health.values().filter(|h| h.up).count();
        self.queue.clear();
        if available < needed {
            self.drop_invalid_current();
            return Err(MmuError::InsufficientMembers { available, needed });
        }
        if !self.is_up(self.proposer) || !self.is_up(self.pivot) {
            self.drop_invalid_current();
            return Ok(());
        }
        let mut others: Vec<NodeId> = self
            .health
            .iter()
            .filter(|(id, h)| h.up && **id != self.proposer && **id != self.pivot)
            .map(|(id, _)| *id)
            .collect();
        others.sort_by(|a, b| self.rtt(*a).total_cmp(&self.rtt(*b)).then(a.cmp(b)));
        let k = needed - 2;
        let windows = (others.len() + 1)
            .saturating_sub(k)
            .min(self.config.queue_depth);
        for start in 0..windows {
            let mut members: Vec<NodeId> = vec![self.proposer, self.pivot];
            members.extend_from_slice(&others[start..start + k]);
            members.sort();
            let booth = self.provision(members, now);
            self.queue.push(booth);
        }
        self.sort_queue();
        self.drop_invalid_current();
        Ok(())
    }

    /// Key material is generated once per member set and installed directly
    /// into members' keystores, so composing never touches the network.
    fn provision(&mut self, members: Vec<NodeId>, now: SimTime) -> Arc<Booth> {
        if let Some(b) = self.booths_by_members.get(&members) {
            return b.clone();
        }
        let mut h = self
            .alg
            .tuple("dealer")
            .u64(self.seed)
            .u64(self.instance as u64);
        for id in &members {
            h = h.u64(id.0 as u64);
        }
        let mut rng = ChaCha20Rng::from_seed(h.finish().0);
        let material = setup_booth_keys(&members, 2 * self.config.f, self.alg, &mut rng)
            .expect("booth size fixes a valid threshold");
        self.dealer.install(
            material.verify_key.fingerprint_cached(),
            material.shares.into_values(),
        );
        let identities = members
            .iter()
            .map(|id| self.directory[id].clone())
            .collect();
        let booth = Arc::new(Booth::new(
            self.proposer,
            self.pivot,
            identities,
            material.verify_key,
            now,
        ));
        self.booths_by_members.insert(members, booth.clone());
        booth
    }

    fn rtt(&self, id: NodeId) -> f64 {
        self.health
            .get(&id)
            .filter(|h| h.up)
            .and_then(|h| h.rtt_ewma)
            .unwrap_or(f64::INFINITY)
    }

    /// Slowest member's smoothed RTT; the proposer's own link counts as 0.
    pub fn booth_latency(&self, booth: &Booth) -> f64 {
        booth
            .member_ids()
            .filter(|id| *id != self.proposer)
            .map(|id| self.rtt(id))
            .fold(0.0, f64::max)
    }

    fn sort_queue(&mut self) {
        let queue = std::mem::take(&mut self.queue);
        let mut keyed: Vec<(f64, Arc<Booth>)> = queue
            .into_iter()
            .map(|b| (self.booth_latency(&b), b))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.queue = keyed.into_iter().map(|(_, b)| b).collect();
    }

    /// A booth is usable while proposer and pivot are up and fewer than f
    /// members are down.
    pub fn is_valid(&self, booth: &Booth) -> bool {
        if !self.is_up(booth.proposer) || !self.is_up(booth.pivot) {
            return false;
        }
        let down = booth.member_ids().filter(|id| !self.is_up(*id)).count();
        down < self.config.f
    }

    fn drop_invalid_current(&mut self) {
        if self.ordering.as_ref().is_some_and(|b| !self.is_valid(b)) {
            self.ordering = None;
        }
        if self.consensus.as_ref().is_some_and(|b| !self.is_valid(b)) {
            self.consensus = None;
        }
    }

    /// The booth an instance of `kind` should use now, or `None` if the
    /// caller must wait for an availability change.
    pub fn current_booth(&mut self, kind: BoothKind) -> Option<Arc<Booth>> {
        self.drop_invalid_current();
        if self.ordering.is_none() {
            self.ordering = self.queue.iter().find(|b| self.is_valid(b)).cloned();
        }
        let ordering = self.ordering.clone()?;
        let served = match (kind, self.config.policy) {
            (BoothKind::Ordering, _) | (BoothKind::Consensus, BoothPolicy::Shared) => ordering,
            (BoothKind::Consensus, BoothPolicy::SplitConsensus) => {
                let differs = |b: &Arc<Booth>| b.member_set() != ordering.member_set();
                if !self.consensus.as_ref().is_some_and(differs) {
                    self.consensus = self
                        .queue
                        .iter()
                        .find(|b| self.is_valid(b) && differs(b))
                        .cloned();
                }
                self.consensus.clone().unwrap_or(ordering)
            }
        };
        self.served.insert(served.booth_hash);
        Some(served)
    }

    /// Records an availability change. Returns whether anything changed.
    pub fn mark_availability(
        &mut self,
        id: NodeId,
        status: Status,
        now: SimTime,
    ) -> Result<bool, MmuError> {
        let h = self.health.get_mut(&id).ok_or(MmuError::UnknownNode(id))?;
        let up = status == Status::Up;
        if h.up == up {
            return Ok(false);
        }
        h.up = up;
        h.missed = 0;
        if !up {
            h.rtt_ewma = None;
        }
        // Too few nodes simply leaves the queue empty until recovery.
        let _ = self.compose_booths(now);
        Ok(true)
    }

    /// Folds in a ping round trip; a reply from a down node brings it back.
    pub fn record_rtt(&mut self, id: NodeId, rtt: SimTime, now: SimTime) -> Result<(), MmuError> {
        let alpha = self.config.ewma_alpha;
        let h = self.health.get_mut(&id).ok_or(MmuError::UnknownNode(id))?;
        h.missed = 0;
        h.last_ping_latency = Some(rtt);
        let sample = rtt as f64;
        h.rtt_ewma = Some(match h.rtt_ewma {
            Some(prev) => alpha * sample + (1.0 - alpha) * prev,
            None => sample,
        });
        if !h.up {
            self.mark_availability(id, Status::Up, now)?;
        }
        Ok(())
    }

    /// Counts a ping that went unanswered for a full period.
    pub fn record_missed(&mut self, id: NodeId, now: SimTime) -> Result<(), MmuError> {
        let limit = self.config.missed_pings_down;
        let h = self.health.get_mut(&id).ok_or(MmuError::UnknownNode(id))?;
        h.missed += 1;
        if h.up && h.missed >= limit {
            self.mark_availability(id, Status::Down, now)?;
        }
        Ok(())
    }

    /// Ping tick: reorder the queue by current latency estimates.
    pub fn ping_tick(&mut self) {
        self.sort_queue();
    }

    /// Estimated round trip of a booth, for timeouts.
    pub fn booth_rtt(&self, booth: &Booth) -> Option<f64> {
        let l = self.booth_latency(booth);
        l.is_finite().then_some(l)
    }
}
