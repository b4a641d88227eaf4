//! A participant: routes messages and timers to the protocol state machines
//! of every instance it takes part in, drives the proposer workload and
//! liveness pings, records metrics, and applies Byzantine behaviors to its
//! own output.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bytes::Bytes;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::booth::{Booth, BoothBook, Directory, Quorum};
use crate::consensus::{
    ConsensusConfig, ConsensusProposer, ConsensusValidator, Finalized, PreCommitPath,
};
use crate::crypto::{aggregate, Digest, HashAlg, IdentityKey, NodeId, PartialSignature};
use crate::engine::{Counters, Ctx, Effects, Lane, Outgoing, Timer};
use crate::gossip::{GossipConfig, GossipNode};
use crate::ledger::{ordering_digest, DataBatch, Ledger, OrderLog, Transaction};
use crate::mmu::{Dealer, Mmu, Status};
use crate::ordering::{OrderingConfig, OrderingProposer, OrderingValidator, Released};
use crate::storage::{RetentionPolicy, Role, StorageMaster, StoredTx};
use crate::time::{SimTime, NANOS_PER_SEC};
use crate::wire::{Commit, Envelope, Message, Order, PoReply, PreOrder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Drops all protocol output but still answers pings.
    Silent,
    /// Validator: corrupts its reply signatures. Proposer: alters batch
    /// payloads after hashing.
    TamperPayload,
    /// Proposer: swaps a quorum member for an outsider in orders and commits.
    ForgeQuorum,
    /// Forwards gossip without lowering the lifetime.
    MutateGossipLifetime,
    /// Proposer: reuses every ordering id for a second batch in a second booth.
    EquivocateOrderingId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByzantineProfile {
    pub node_id: NodeId,
    pub behaviors: BTreeSet<Behavior>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WorkloadMode {
    /// Keep this many batches in flight.
    Saturation { max_inflight: usize },
    /// Offer batches at a fixed rate regardless of progress.
    Rate { batches_per_sec: f64 },
}

impl Default for WorkloadMode {
    fn default() -> Self {
        WorkloadMode::Saturation { max_inflight: 8 }
    }
}

/// Settings shared by every node of a run.
#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub alg: HashAlg,
    pub window_len: SimTime,
    pub batch_size: usize,
    pub entry_size: usize,
    pub workload: WorkloadMode,
    /// Proposers stop creating batches at this time.
    pub propose_until: SimTime,
    /// Last time a window tick may fire.
    pub tick_until: SimTime,
    pub ping_period: SimTime,
    pub cleanup_period: SimTime,
    pub ordering: OrderingConfig,
    pub consensus: ConsensusConfig,
    pub gossip: GossipConfig,
    pub retention: RetentionPolicy,
    pub seed: u64,
}

/// One protocol instance: its proposer, pivot and the nodes its booths
/// may be drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub id: u32,
    pub proposer: NodeId,
    pub pivot: NodeId,
    pub pool: Vec<NodeId>,
    pub f: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub at: SimTime,
    pub entries: u32,
    pub latency: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLine {
    pub instance: u32,
    pub ts: SimTime,
    pub committed: bool,
    pub batches: usize,
    pub entries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_hash: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub booth: Option<Digest>,
    pub attempts: u32,
    pub closed_at: SimTime,
}

#[derive(Clone, Debug, Default)]
pub struct InstanceMetrics {
    pub ordered: Vec<Sample>,
    pub committed: Vec<Sample>,
    pub windows: Vec<WindowLine>,
    /// Commit time per batch hash.
    pub committed_at: BTreeMap<Digest, SimTime>,
    pub ordering_booth_changes: u64,
    pub consensus_booth_changes: u64,
    last_ordering_booth: Option<Digest>,
    last_consensus_booth: Option<Digest>,
}

#[derive(Clone, Debug)]
struct Shadow {
    id: u64,
    booth: Arc<Booth>,
    digest: Digest,
    replies: Vec<PartialSignature>,
    ordered: bool,
}

/// A second pre-order an equivocating proposer issued under a reused id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivocation {
    pub id: u64,
    pub shadow_batch: Digest,
    pub shadow_booth: Digest,
    pub shadow_ordered: bool,
}

/// State a node keeps for an instance it proposes.
pub struct ProposerSide {
    pub spec: InstanceSpec,
    pub mmu: Mmu,
    pub ordering: OrderingProposer,
    pub consensus: ConsensusProposer,
    pub log: OrderLog,
    pub ledger: Ledger,
    pub metrics: InstanceMetrics,
    rng: ChaCha8Rng,
    next_seq: u64,
    retry_armed: bool,
    pings: BTreeMap<NodeId, (u64, SimTime)>,
    ping_nonce: u64,
    shadows: BTreeMap<Digest, Shadow>,
}

impl ProposerSide {
    pub fn equivocations(&self) -> Vec<Equivocation> {
        self.shadows
            .values()
            .map(|s| Equivocation {
                id: s.id,
                shadow_batch: s.digest,
                shadow_booth: s.booth.booth_hash,
                shadow_ordered: s.ordered,
            })
            .collect()
    }
}

/// State a node keeps for an instance it validates.
pub struct ValidatorSide {
    pub spec: InstanceSpec,
    pub ordering: OrderingValidator,
    pub consensus: ConsensusValidator,
    pub log: OrderLog,
    pub ledger: Ledger,
}

pub enum Input {
    Message { from: NodeId, envelope: Envelope },
    Timer(Timer),
}

struct GossipJob {
    commit: Commit,
    tx: Arc<Transaction>,
    members: BTreeSet<NodeId>,
}

pub struct Node {
    pub id: NodeId,
    key: IdentityKey,
    directory: Arc<Directory>,
    dealer: Arc<Dealer>,
    config: Arc<NodeConfig>,
    pub booths: BoothBook,
    pub proposing: BTreeMap<u32, ProposerSide>,
    pub validating: BTreeMap<u32, ValidatorSide>,
    pub storage: StorageMaster,
    pub gossip: GossipNode,
    pub peers: Vec<NodeId>,
    /// Every instance of the run, so vehicles outside a pool can still
    /// check gossip roots.
    instances: BTreeMap<u32, InstanceSpec>,
    pub behaviors: BTreeSet<Behavior>,
    pub counters: Counters,
    gossip_jobs: BTreeMap<(u32, SimTime), GossipJob>,
}

pub(crate) fn sub_seed(seed: u64, domain: &str, a: u64, b: u64) -> u64 {
    let d = HashAlg::Sha256
        .tuple(domain)
        .u64(seed)
        .u64(a)
        .u64(b)
        .finish();
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

impl Node {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        key: IdentityKey,
        directory: Arc<Directory>,
        dealer: Arc<Dealer>,
        config: Arc<NodeConfig>,
        instances: &[InstanceSpec],
        mmu_config: &crate::mmu::MmuConfig,
        peers: Vec<NodeId>,
        behaviors: BTreeSet<Behavior>,
    ) -> Self {
        let id = key.node_id();
        let mut proposing = BTreeMap::new();
        let mut validating = BTreeMap::new();
        for spec in instances {
            if spec.proposer == id {
                let mut mmu = Mmu::new(
                    mmu_config.clone(),
                    spec.id,
                    config.seed,
                    config.alg,
                    spec.proposer,
                    spec.pivot,
                    spec.pool.iter().map(|n| directory[n].clone()),
                    dealer.clone(),
                );
                // Too few nodes leaves the queue empty; proposals then wait.
                let _ = mmu.compose_booths(0);
                let metrics = InstanceMetrics {
                    last_consensus_booth: mmu.queue().first().map(|b| b.booth_hash),
                    ..Default::default()
                };
                proposing.insert(
                    spec.id,
                    ProposerSide {
                        spec: spec.clone(),
                        mmu,
                        ordering: OrderingProposer::new(spec.id, config.ordering.clone()),
                        consensus: ConsensusProposer::new(
                            spec.id,
                            config.window_len,
                            config.consensus.clone(),
                        ),
                        log: OrderLog::new(),
                        ledger: Ledger::new(config.window_len),
                        metrics,
                        rng: ChaCha8Rng::seed_from_u64(sub_seed(
                            config.seed,
                            "workload",
                            spec.id as u64,
                            0,
                        )),
                        next_seq: 0,
                        retry_armed: false,
                        pings: BTreeMap::new(),
                        ping_nonce: 0,
                        shadows: BTreeMap::new(),
                    },
                );
            } else if spec.pool.contains(&id) {
                validating.insert(
                    spec.id,
                    ValidatorSide {
                        spec: spec.clone(),
                        ordering: OrderingValidator::new(
                            spec.id,
                            spec.proposer,
                            spec.pivot,
                            spec.f,
                        ),
                        consensus: ConsensusValidator::new(
                            spec.id,
                            spec.proposer,
                            spec.pivot,
                            spec.f,
                            config.window_len,
                        ),
                        log: OrderLog::new(),
                        ledger: Ledger::new(config.window_len),
                    },
                );
            }
        }
        let gossip = GossipNode::new(
            config.gossip.clone(),
            sub_seed(config.seed, "gossip", id.0 as u64, 0),
        );
        Self {
            id,
            key,
            directory,
            dealer,
            storage: StorageMaster::new(config.retention),
            config,
            booths: BoothBook::default(),
            proposing,
            validating,
            gossip,
            peers,
            instances: instances.iter().map(|s| (s.id, s.clone())).collect(),
            behaviors,
            counters: Counters::default(),
            gossip_jobs: BTreeMap::new(),
        }
    }

    pub fn is_byzantine(&self) -> bool {
        !self.behaviors.is_empty()
    }

    /// Timers every node arms at time zero, as (fire time, timer).
    pub fn initial_timers(&self) -> Vec<(SimTime, Timer)> {
        let mut t = Vec::new();
        for &instance in self.proposing.keys() {
            t.push((0, Timer::NextBatch { instance }));
            t.push((
                self.config.window_len,
                Timer::WindowTick {
                    instance,
                    window: 0,
                },
            ));
        }
        if !self.proposing.is_empty() && self.config.ping_period > 0 {
            t.push((0, Timer::PingTick));
        }
        if self.config.cleanup_period > 0 {
            t.push((self.config.cleanup_period, Timer::StorageCleanup));
        }
        t
    }

    /// Availability change seen by this node's membership units.
    pub fn on_churn(&mut self, node: NodeId, status: Status, now: SimTime) {
        for side in self.proposing.values_mut() {
            if side
                .mmu
                .mark_availability(node, status, now)
                .unwrap_or(false)
            {
                self.counters.bump("mmu.availability_changes");
            }
        }
    }

    /// Handles one input and returns its effects after any Byzantine
    /// transforms.
    pub fn step(&mut self, mut ctx: Ctx, input: Input) -> Effects {
        match input {
            Input::Message { from, envelope } => self.on_message(&mut ctx, from, envelope),
            Input::Timer(timer) => self.on_timer(&mut ctx, timer),
        }
        let mut fx = ctx.into_effects();
        if !self.behaviors.is_empty() {
            self.misbehave(&mut fx);
        }
        fx
    }

    fn reject(&mut self, phase: &str, name: &str) {
        self.counters.bump(format!("reject.{phase}.{name}"));
    }

    fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, env: Envelope) {
        let instance = env.instance;
        if self.proposing.contains_key(&instance) {
            self.on_proposer_message(ctx, from, instance, env.msg);
        } else {
            self.on_validator_message(ctx, from, instance, env.msg);
        }
    }

    fn on_proposer_message(&mut self, ctx: &mut Ctx, from: NodeId, instance: u32, msg: Message) {
        let side = self.proposing.get_mut(&instance).expect("caller checked");
        match msg {
            Message::PoReply(reply) => {
                if let Some(shadow) = self.shadows_hit(instance, &reply) {
                    self.on_shadow_reply(ctx, instance, shadow, from, reply);
                    return;
                }
                let side = self.proposing.get_mut(&instance).expect("present");
                match side.ordering.on_reply(ctx, &mut side.log, from, reply) {
                    Ok(released) => {
                        if !released.is_empty() {
                            self.record_released(ctx, instance, released);
                            if matches!(self.config.workload, WorkloadMode::Saturation { .. }) {
                                ctx.set_timer(ctx.charged(), Timer::NextBatch { instance });
                            }
                        }
                    }
                    Err(e) => self.reject("ordering", e.name()),
                }
            }
            Message::PcReply(reply) => {
                match side
                    .consensus
                    .on_reply(ctx, &self.booths, &mut side.ledger, from, reply)
                {
                    Ok(finalized) => self.record_finalized(ctx, instance, finalized),
                    Err(e) => self.reject("consensus", e.name()),
                }
            }
            Message::Pong { nonce } => {
                if let Some(&(n, sent)) = side.pings.get(&from) {
                    if n == nonce {
                        side.pings.remove(&from);
                        let _ = side
                            .mmu
                            .record_rtt(from, ctx.now.saturating_sub(sent), ctx.now);
                    }
                }
            }
            Message::GossipAck(ack) => match self.gossip.on_ack(from, ack) {
                Ok(true) => self.counters.bump("gossip.acks"),
                Ok(false) => {}
                Err(_) => self.counters.bump("gossip.UnknownCommit"),
            },
            Message::Ping { nonce } => {
                ctx.send(vec![from], Envelope::new(instance, Message::Pong { nonce }))
            }
            other => self.reject("proposer", other.name()),
        }
    }

    fn on_validator_message(&mut self, ctx: &mut Ctx, from: NodeId, instance: u32, msg: Message) {
        // Pings and gossip are answered whatever this node's role.
        match msg {
            Message::Ping { nonce } => {
                ctx.send(vec![from], Envelope::new(instance, Message::Pong { nonce }));
                return;
            }
            Message::Gossip(g) => {
                self.on_gossip(ctx, from, instance, g);
                return;
            }
            Message::GossipAck(ack) => {
                match self.gossip.on_ack(from, ack) {
                    Ok(true) => self.counters.bump("gossip.acks"),
                    Ok(false) => {}
                    Err(_) => self.counters.bump("gossip.UnknownCommit"),
                }
                return;
            }
            _ => {}
        }
        let Some(side) = self.validating.get_mut(&instance) else {
            self.counters.bump("reject.unknown_instance");
            return;
        };
        match msg {
            Message::PreOrder(m) => {
                if let Err(e) = side.ordering.on_pre_order(
                    ctx,
                    &self.key,
                    &self.dealer,
                    &self.directory,
                    &mut self.booths,
                    from,
                    m,
                ) {
                    self.reject("ordering", e.name());
                }
            }
            Message::Order(m) => {
                let id = m.id;
                match side.ordering.on_order(ctx, &mut side.log, from, m) {
                    Ok(true) => {
                        let outcomes = side.consensus.on_ordered(
                            ctx,
                            &self.key,
                            &self.dealer,
                            &self.directory,
                            &mut self.booths,
                            &mut side.log,
                            id,
                        );
                        let proposer = side.spec.proposer;
                        for (ts, o) in outcomes {
                            match o {
                                Ok(PreCommitPath::Deferred) => {}
                                Ok(_) => {
                                    self.counters.bump("consensus.resumed");
                                    let side = self.validating.get_mut(&instance).expect("present");
                                    if let Some(c) = side.consensus.take_early_commit(ts) {
                                        self.validator_commit(ctx, instance, proposer, c);
                                    }
                                }
                                Err(e) => self.reject("consensus", e.name()),
                            }
                        }
                    }
                    Ok(false) => {}
                    Err(e) => self.reject("ordering", e.name()),
                }
            }
            Message::PreCommit(m) => {
                match side.consensus.on_pre_commit(
                    ctx,
                    &self.key,
                    &self.dealer,
                    &self.directory,
                    &mut self.booths,
                    &mut side.log,
                    from,
                    m,
                ) {
                    Ok(PreCommitPath::Deferred) => self.counters.bump("consensus.deferred"),
                    Ok(_) => {}
                    Err(e) => self.reject("consensus", e.name()),
                }
            }
            Message::Commit(m) => self.validator_commit(ctx, instance, from, m),
            other => self.reject("validator", other.name()),
        }
    }

    fn validator_commit(&mut self, ctx: &mut Ctx, instance: u32, from: NodeId, m: Commit) {
        let side = self.validating.get_mut(&instance).expect("caller checked");
        let ts = m.ts;
        match side
            .consensus
            .on_commit(ctx, &mut side.ledger, from, m.clone())
        {
            Ok(Some((tx, commit))) => {
                let pivot = side.spec.pivot;
                let _ = self.storage.register(
                    instance,
                    Role::Validator,
                    StoredTx {
                        tx: tx.clone(),
                        commit,
                    },
                    ctx.now,
                );
                if self.config.gossip.enabled && pivot == self.id {
                    self.gossip_jobs.insert(
                        (instance, ts),
                        GossipJob {
                            commit: m,
                            tx,
                            members: BTreeSet::new(),
                        },
                    );
                    ctx.set_timer(0, Timer::GossipStart { instance, ts });
                }
            }
            Ok(None) => {}
            Err(e) => self.reject("consensus", e.name()),
        }
    }

    fn on_gossip(&mut self, ctx: &mut Ctx, from: NodeId, instance: u32, g: crate::wire::Gossip) {
        if !self.config.gossip.enabled {
            return;
        }
        let Some(spec) = self.instances.get(&instance) else {
            self.counters.bump("drop.gossip.UnknownInstance");
            return;
        };
        let (root, pivot) = (spec.proposer, spec.pivot);
        match self.gossip.on_gossip(
            ctx,
            &self.key,
            &self.directory,
            instance,
            root,
            &[root, pivot],
            from,
            g,
            &self.peers,
        ) {
            Ok(acc) => {
                self.counters.bump("gossip.stored");
                let commit = crate::ledger::CommitRecord {
                    ts: acc.commit.ts,
                    quorum: acc.commit.quorum,
                    booth_ref: acc.commit.booth_hash,
                    cert: acc.commit.cert,
                    tx_hash: acc.commit.tx_hash,
                };
                let _ = self.storage.register(
                    instance,
                    Role::Gossiper,
                    StoredTx { tx: acc.tx, commit },
                    ctx.now,
                );
            }
            Err(e) => self.counters.bump(format!("drop.gossip.{}", e.name())),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::NextBatch { instance } => self.next_batch(ctx, instance),
            Timer::ResumeWaiting { instance } => self.resume_waiting(ctx, instance),
            Timer::OrderingTimeout { instance, id } => {
                let Some(side) = self.proposing.get_mut(&instance) else {
                    return;
                };
                let out = side.ordering.on_timeout(
                    ctx,
                    &mut side.mmu,
                    &mut self.booths,
                    &self.key,
                    &mut side.log,
                    id,
                );
                if out.aborted {
                    self.counters.bump("ordering.timeouts");
                }
                if out.parked {
                    self.counters.bump("ordering.parked");
                }
                if side.ordering.waiting() > 0 {
                    self.arm_retry(ctx, instance);
                }
                if !out.released.is_empty() {
                    self.record_released(ctx, instance, out.released);
                }
                if out.aborted && matches!(self.config.workload, WorkloadMode::Saturation { .. }) {
                    ctx.set_timer(ctx.charged(), Timer::NextBatch { instance });
                }
            }
            Timer::WindowTick { instance, window } => {
                let Some(side) = self.proposing.get_mut(&instance) else {
                    return;
                };
                let finalized = side.consensus.on_tick(
                    ctx,
                    &mut side.mmu,
                    &mut self.booths,
                    &self.key,
                    &side.log,
                    &mut side.ledger,
                    window,
                );
                let next = (window + 2) * self.config.window_len;
                if next <= self.config.tick_until {
                    ctx.set_timer(
                        next.saturating_sub(ctx.now),
                        Timer::WindowTick {
                            instance,
                            window: window + 1,
                        },
                    );
                }
                self.record_finalized(ctx, instance, finalized);
            }
            Timer::ConsensusTimeout {
                instance,
                ts,
                attempt,
            } => {
                let Some(side) = self.proposing.get_mut(&instance) else {
                    return;
                };
                if side.consensus.on_timeout(
                    ctx,
                    &mut side.mmu,
                    &mut self.booths,
                    &self.key,
                    ts,
                    attempt,
                ) {
                    self.counters.bump("consensus.timeouts");
                }
            }
            Timer::PingTick => self.ping_tick(ctx),
            Timer::StorageCleanup => {
                let removed = self.storage.cleanup(ctx.now);
                if removed > 0 {
                    self.counters
                        .0
                        .entry("storage.expired".into())
                        .and_modify(|v| *v += removed as u64)
                        .or_insert(removed as u64);
                }
                ctx.set_timer(self.config.cleanup_period, Timer::StorageCleanup);
            }
            Timer::GossipStart { instance, ts } => self.gossip_start(ctx, instance, ts),
        }
    }

    fn arm_retry(&mut self, ctx: &mut Ctx, instance: u32) {
        let Some(side) = self.proposing.get_mut(&instance) else {
            return;
        };
        if !side.retry_armed {
            side.retry_armed = true;
            ctx.set_timer(
                self.config.ping_period.max(1),
                Timer::ResumeWaiting { instance },
            );
        }
    }

    /// A rate workload keeps its own proposal clock, so only a saturating
    /// one may top up in-flight batches here.
    fn resume_waiting(&mut self, ctx: &mut Ctx, instance: u32) {
        if matches!(self.config.workload, WorkloadMode::Saturation { .. }) {
            self.next_batch(ctx, instance);
            return;
        }
        let Some(side) = self.proposing.get_mut(&instance) else {
            return;
        };
        side.retry_armed = false;
        side.ordering
            .resume(ctx, &mut side.mmu, &mut self.booths, &self.key);
        if side.ordering.waiting() > 0 {
            self.arm_retry(ctx, instance);
        }
    }

    fn make_batch(&mut self, ctx: &mut Ctx, instance: u32) -> Arc<DataBatch> {
        let side = self.proposing.get_mut(&instance).expect("caller checked");
        let beta = self.config.batch_size;
        let m = self.config.entry_size;
        let mut payload = vec![0u8; beta * m];
        side.rng.fill_bytes(&mut payload);
        ctx.charge_hash(payload.len());
        let batch = DataBatch::new(side.next_seq, m as u32, Bytes::from(payload), ctx.alg);
        side.next_seq += beta as u64;
        Arc::new(batch)
    }

    fn next_batch(&mut self, ctx: &mut Ctx, instance: u32) {
        let Some(side) = self.proposing.get_mut(&instance) else {
            return;
        };
        side.retry_armed = false;
        side.ordering
            .resume(ctx, &mut side.mmu, &mut self.booths, &self.key);
        let open = ctx.now < self.config.propose_until;
        match self.config.workload {
            WorkloadMode::Saturation { max_inflight } => {
                while open && self.proposing[&instance].ordering.inflight() < max_inflight {
                    let batch = self.make_batch(ctx, instance);
                    let side = self.proposing.get_mut(&instance).expect("present");
                    if side
                        .ordering
                        .propose(ctx, &mut side.mmu, &mut self.booths, &self.key, batch)
                        .is_none()
                    {
                        break;
                    }
                }
            }
            WorkloadMode::Rate { batches_per_sec } => {
                if open && batches_per_sec > 0.0 {
                    let batch = self.make_batch(ctx, instance);
                    let side = self.proposing.get_mut(&instance).expect("present");
                    side.ordering
                        .propose(ctx, &mut side.mmu, &mut self.booths, &self.key, batch);
                    let period = (NANOS_PER_SEC as f64 / batches_per_sec).max(1.0) as SimTime;
                    ctx.set_timer(period, Timer::NextBatch { instance });
                }
            }
        }
        if self.proposing[&instance].ordering.waiting() > 0 {
            self.arm_retry(ctx, instance);
        }
    }

    fn record_released(&mut self, ctx: &Ctx, instance: u32, released: Vec<Released>) {
        let side = self.proposing.get_mut(&instance).expect("caller checked");
        for r in released {
            let entries = r.entry.batch.len() as u32;
            side.metrics.ordered.push(Sample {
                at: ctx.now,
                entries,
                latency: ctx.now.saturating_sub(r.proposed_at),
            });
            if side
                .metrics
                .last_ordering_booth
                .is_some_and(|prev| prev != r.entry.booth_ref)
            {
                side.metrics.ordering_booth_changes += 1;
            }
            side.metrics.last_ordering_booth = Some(r.entry.booth_ref);
        }
    }

    fn record_finalized(&mut self, ctx: &mut Ctx, instance: u32, finalized: Vec<Finalized>) {
        for fin in finalized {
            let side = self.proposing.get_mut(&instance).expect("caller checked");
            match fin {
                Finalized::Covered { ts } => side.metrics.windows.push(WindowLine {
                    instance,
                    ts,
                    committed: false,
                    batches: 0,
                    entries: 0,
                    tx_hash: None,
                    booth: None,
                    attempts: 0,
                    closed_at: ctx.now,
                }),
                Finalized::Committed {
                    tx,
                    commit,
                    message,
                    attempts,
                } => {
                    for e in &tx.entries {
                        let proposed = side.ordering.journal().get(&e.batch.batch_hash).copied();
                        side.metrics
                            .committed_at
                            .insert(e.batch.batch_hash, ctx.now);
                        side.metrics.committed.push(Sample {
                            at: ctx.now,
                            entries: e.batch.len() as u32,
                            latency: proposed.map_or(0, |p| ctx.now.saturating_sub(p)),
                        });
                    }
                    if side
                        .metrics
                        .last_consensus_booth
                        .is_some_and(|prev| prev != commit.booth_ref)
                    {
                        side.metrics.consensus_booth_changes += 1;
                    }
                    side.metrics.last_consensus_booth = Some(commit.booth_ref);
                    side.metrics.windows.push(WindowLine {
                        instance,
                        ts: commit.ts,
                        committed: true,
                        batches: tx.entries.len(),
                        entries: tx.data_entries(),
                        tx_hash: Some(commit.tx_hash),
                        booth: Some(commit.booth_ref),
                        attempts,
                        closed_at: ctx.now,
                    });
                    let members = self
                        .booths
                        .get(&commit.booth_ref)
                        .map(|b| b.member_set())
                        .unwrap_or_default();
                    let ts = commit.ts;
                    let _ = self.storage.register(
                        instance,
                        Role::Proposer,
                        StoredTx {
                            tx: tx.clone(),
                            commit,
                        },
                        ctx.now,
                    );
                    if self.config.gossip.enabled {
                        self.gossip_jobs.insert(
                            (instance, ts),
                            GossipJob {
                                commit: message,
                                tx,
                                members,
                            },
                        );
                        ctx.set_timer(0, Timer::GossipStart { instance, ts });
                    }
                }
            }
        }
    }

    fn gossip_start(&mut self, ctx: &mut Ctx, instance: u32, ts: SimTime) {
        let Some(job) = self.gossip_jobs.remove(&(instance, ts)) else {
            return;
        };
        if self.proposing.contains_key(&instance) {
            let me = self.directory[&self.id].clone();
            self.gossip.init(
                ctx,
                &self.key,
                me,
                instance,
                job.commit,
                job.tx,
                &job.members,
                &self.peers,
            );
        } else {
            // The pivot registers propagators too.
            let bytes = crate::codec::Encode::to_bytes(&job.commit);
            ctx.charge_hash(bytes.len());
            self.gossip.track(ctx.alg.digest(&bytes));
        }
    }

    fn ping_tick(&mut self, ctx: &mut Ctx) {
        for side in self.proposing.values_mut() {
            let targets: Vec<NodeId> = side
                .spec
                .pool
                .iter()
                .copied()
                .filter(|n| *n != self.id)
                .collect();
            side.ping_nonce += 1;
            let nonce = side.ping_nonce;
            for t in &targets {
                if side.pings.contains_key(t) {
                    let _ = side.mmu.record_missed(*t, ctx.now);
                }
                side.pings.insert(*t, (nonce, ctx.now));
            }
            side.mmu.ping_tick();
            ctx.send(
                targets,
                Envelope::new(side.spec.id, Message::Ping { nonce }),
            );
        }
        ctx.set_timer(self.config.ping_period, Timer::PingTick);
    }

    fn shadows_hit(&self, instance: u32, reply: &PoReply) -> Option<Digest> {
        let side = self.proposing.get(&instance)?;
        let digest = reply.partial.payload_digest;
        side.shadows
            .get(&digest)
            .filter(|s| s.id == reply.id)
            .map(|_| digest)
    }

    fn on_shadow_reply(
        &mut self,
        ctx: &mut Ctx,
        instance: u32,
        digest: Digest,
        from: NodeId,
        reply: PoReply,
    ) {
        let side = self.proposing.get_mut(&instance).expect("caller checked");
        let shadow = side.shadows.get_mut(&digest).expect("caller checked");
        let p = reply.partial;
        if shadow.ordered || p.signer != from || !shadow.booth.contains(from) || p.share.is_none() {
            return;
        }
        if shadow.replies.iter().any(|r| r.signer == from) {
            return;
        }
        shadow.replies.push(p);
        let booth = shadow.booth.clone();
        let Some(pivot) = shadow
            .replies
            .iter()
            .find(|r| r.signer == booth.pivot)
            .cloned()
        else {
            return;
        };
        if shadow.replies.len() < booth.quorum_size() {
            return;
        }
        let mut chosen = vec![pivot];
        chosen.extend(
            shadow
                .replies
                .iter()
                .filter(|r| r.signer != booth.pivot)
                .take(booth.quorum_size() - 1)
                .cloned(),
        );
        let Ok(cert) = aggregate(&chosen, &booth.verify_key) else {
            return;
        };
        shadow.ordered = true;
        let quorum: Quorum = chosen.iter().map(|r| r.signer).collect();
        self.counters.bump("equivocation.shadow_ordered");
        ctx.send(
            booth.validators().collect(),
            Envelope::new(
                instance,
                Message::Order(Order {
                    id: shadow.id,
                    quorum,
                    cert,
                }),
            ),
        );
    }

    fn misbehave(&mut self, fx: &mut Effects) {
        let behaviors = self.behaviors.clone();
        if behaviors.contains(&Behavior::Silent) {
            fx.out.retain(|o| o.envelope.lane() == Lane::Control);
            return;
        }
        let mut extra = Vec::new();
        for o in &mut fx.out {
            let instance = o.envelope.instance;
            match &mut o.envelope.msg {
                Message::PoReply(r) if behaviors.contains(&Behavior::TamperPayload) => {
                    r.partial.sig_bytes = r.partial.sig_bytes.with_bit_flipped(0);
                }
                Message::PcReply(r) if behaviors.contains(&Behavior::TamperPayload) => {
                    r.partial.sig_bytes = r.partial.sig_bytes.with_bit_flipped(0);
                }
                Message::PreOrder(m) => {
                    if behaviors.contains(&Behavior::EquivocateOrderingId) {
                        if let Some(shadow) = self.equivocate(instance, m) {
                            extra.push(shadow);
                        }
                    }
                    if behaviors.contains(&Behavior::TamperPayload) {
                        let mut payload = m.batch.payload.to_vec();
                        if let Some(b) = payload.first_mut() {
                            *b ^= 0xff;
                        }
                        m.batch = Arc::new(DataBatch {
                            payload: Bytes::from(payload),
                            ..(*m.batch).clone()
                        });
                    }
                }
                Message::Order(m) if behaviors.contains(&Behavior::ForgeQuorum) => {
                    let booth = self.proposing.get(&instance).and_then(|s| {
                        s.ordering
                            .instance(m.id)
                            .map(|i| i.booth.clone())
                            .or_else(|| {
                                s.log
                                    .get(m.id)
                                    .and_then(|e| self.booths.get(&e.booth_ref).cloned())
                            })
                    });
                    if let Some(booth) = booth {
                        forge(&mut m.quorum, &booth, &self.directory, self.id);
                    }
                }
                Message::Commit(m) if behaviors.contains(&Behavior::ForgeQuorum) => {
                    if let Some(booth) = self.booths.get(&m.booth_hash).cloned() {
                        forge(&mut m.quorum, &booth, &self.directory, self.id);
                    }
                }
                Message::Gossip(g) if behaviors.contains(&Behavior::MutateGossipLifetime) => {
                    let n = g.traverse.len();
                    if n >= 2 {
                        let lifetime = g.traverse[n - 2].lifetime;
                        let d = crate::gossip::traverse_digest(
                            self.config.alg,
                            &g.commit_hash,
                            lifetime,
                        );
                        let last = &mut g.traverse[n - 1];
                        last.lifetime = lifetime;
                        last.sig = self.key.sign_raw(&d);
                    }
                }
                _ => {}
            }
        }
        fx.out.extend(extra);
    }

    /// Builds a second pre-order reusing `m.id` for a different batch in the
    /// valid booth that overlaps the original least.
    fn equivocate(&mut self, instance: u32, m: &PreOrder) -> Option<Outgoing> {
        let alg = self.config.alg;
        let side = self.proposing.get_mut(&instance)?;
        let original = m.booth.member_set();
        let booth = side
            .mmu
            .queue()
            .iter()
            .filter(|b| side.mmu.is_valid(b) && b.member_set() != original)
            .min_by_key(|b| b.member_set().intersection(&original).count())?
            .clone();
        let mut payload = m.batch.payload.to_vec();
        let flip = side.rng.gen_range(0..payload.len().max(1));
        if let Some(b) = payload.get_mut(flip) {
            *b ^= 0x5a;
        }
        let batch = Arc::new(DataBatch::new(
            m.batch.first_seq,
            m.batch.entry_size,
            Bytes::from(payload),
            alg,
        ));
        let digest = ordering_digest(alg, m.id, &batch.batch_hash, &booth.booth_hash);
        let proposer_sig = self.key.sign_raw(&digest);
        side.shadows.insert(
            digest,
            Shadow {
                id: m.id,
                booth: booth.clone(),
                digest,
                replies: Vec::new(),
                ordered: false,
            },
        );
        self.counters.bump("equivocation.shadows");
        Some(Outgoing {
            to: booth.validators().collect(),
            envelope: Envelope::new(
                instance,
                Message::PreOrder(PreOrder {
                    id: m.id,
                    batch,
                    booth: booth.clone(),
                    booth_hash: booth.booth_hash,
                    proposer_sig,
                }),
            ),
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    /// Ordered log and ledger for `instance`, whichever side this node is.
    pub fn instance_state(&self, instance: u32) -> Option<(&OrderLog, &Ledger)> {
        self.proposing
            .get(&instance)
            .map(|s| (&s.log, &s.ledger))
            .or_else(|| self.validating.get(&instance).map(|s| (&s.log, &s.ledger)))
    }
}

/// Replaces one non-pivot quorum member with a node outside the booth, or
/// with the proposer itself when the pool has no outsiders.
fn forge(quorum: &mut Quorum, booth: &Booth, directory: &Directory, me: NodeId) {
    let Some(victim) = quorum.iter().copied().find(|id| *id != booth.pivot) else {
        return;
    };
    let outsider = directory
        .keys()
        .copied()
        .find(|id| !booth.contains(*id))
        .unwrap_or(me);
    quorum.remove(&victim);
    quorum.insert(outsider);
}
