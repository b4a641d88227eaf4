//! Assembles nodes from a run specification, drives the simulator, and
//! turns the outcome into a throughput/latency report with post-run audits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booth::Directory;
use crate::consensus::ConsensusConfig;
use crate::cost::CostModel;
use crate::crypto::{HashAlg, IdentityKey, NodeId, RoleHint, VerifyCache};
use crate::gossip::GossipConfig;
use crate::mmu::{BoothPolicy, Dealer, MmuConfig, Status};
use crate::netsim::{Network, SimConfig};
use crate::node::{
    sub_seed, Behavior, ByzantineProfile, Equivocation, InstanceSpec, Node, NodeConfig, WindowLine,
    WorkloadMode,
};
use crate::ordering::{OrderingConfig, TimeoutPolicy};
use crate::sim::{MsgStats, Sim};
use crate::storage::{RetentionPolicy, Role};
use crate::time::{as_millis_f64, from_millis_f64, SimTime, NANOS_PER_SEC};
use crate::wire::RoundKey;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {field}: {reason}")]
    ConfigInvalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid {
        field,
        reason: reason.into(),
    }
}

/// One scheduled availability change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub time_ms: f64,
    pub node_id: NodeId,
    pub status: Status,
}

/// Who gossips to whom.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Everyone is everyone's peer.
    #[default]
    Full,
    /// A uniformly random recursive tree rooted at node 0.
    RandomTree { seed: u64 },
    /// Undirected edges.
    Explicit { edges: Vec<(u32, u32)> },
}

impl Topology {
    pub fn adjacency(&self, total: u32) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> =
            (0..total).map(|i| (NodeId(i), BTreeSet::new())).collect();
        let mut link = |a: u32, b: u32| {
            if a != b && a < total && b < total {
                adj.get_mut(&NodeId(a)).expect("in range").insert(NodeId(b));
                adj.get_mut(&NodeId(b)).expect("in range").insert(NodeId(a));
            }
        };
        match self {
            Topology::Full => {
                for a in 0..total {
                    for b in a + 1..total {
                        link(a, b);
                    }
                }
            }
            Topology::RandomTree { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut order: Vec<u32> = (1..total).collect();
                order.shuffle(&mut rng);
                let mut placed = vec![0u32];
                for v in order {
                    let parent = placed[rng.gen_range(0..placed.len())];
                    link(parent, v);
                    placed.push(v);
                }
            }
            Topology::Explicit { edges } => {
                for &(a, b) in edges {
                    link(a, b);
                }
            }
        }
        adj.into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }
}

/// Everything that determines a run. Unset fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// Booth size; must be 3f+1.
    pub n: usize,
    pub f: usize,
    /// Entries per batch.
    pub beta: usize,
    /// Bytes per entry.
    pub m: usize,
    /// Consensus window length.
    pub delta_ms: f64,
    /// Co-located instances; instance k is proposed by node k.
    pub gamma: usize,
    pub gossip: bool,
    pub lifetime: u32,
    pub fanout: usize,
    /// Retention of the temporary storage layer.
    pub tau_ms: f64,
    pub sim: SimConfig,
    pub churn: Vec<ChurnEvent>,
    pub byzantine: Vec<ByzantineProfile>,
    /// Proposals and windows cover `[0, duration)`.
    pub duration_ms: f64,
    /// Samples before this are left out of throughput and latency.
    pub warmup_ms: f64,
    /// Extra simulated time for the last windows to commit.
    pub drain_ms: f64,
    pub seed: u64,
    /// Extra pool members beyond `n`, available as booth replacements.
    pub spares: usize,
    /// Nodes outside every pool that only take part in gossip.
    pub vehicles: usize,
    pub workload: WorkloadMode,
    pub policy: BoothPolicy,
    pub retry_cap: u32,
    pub ordering_timeout: TimeoutPolicy,
    pub consensus_timeout: TimeoutPolicy,
    pub cost: CostModel,
    pub ping_ms: f64,
    pub topology: Topology,
    pub trace: bool,
    pub alg: HashAlg,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            n: 4,
            f: 1,
            beta: 3000,
            m: 32,
            delta_ms: 100.0,
            gamma: 1,
            gossip: false,
            lifetime: 3,
            fanout: 8,
            tau_ms: 86_400_000.0,
            sim: SimConfig::default(),
            churn: Vec::new(),
            byzantine: Vec::new(),
            duration_ms: 1000.0,
            warmup_ms: 0.0,
            drain_ms: 1000.0,
            seed: 0,
            spares: 0,
            vehicles: 0,
            workload: WorkloadMode::default(),
            policy: BoothPolicy::Shared,
            retry_cap: 16,
            ordering_timeout: TimeoutPolicy::default(),
            consensus_timeout: TimeoutPolicy::default(),
            cost: CostModel::default(),
            ping_ms: 50.0,
            topology: Topology::Full,
            trace: false,
            alg: HashAlg::Sha256,
        }
    }
}

impl RunSpec {
    pub fn pool_size(&self) -> usize {
        self.n + self.spares
    }

    pub fn total_nodes(&self) -> usize {
        self.pool_size() + self.vehicles
    }

    pub fn window_len(&self) -> SimTime {
        from_millis_f64(self.delta_ms)
    }

    pub fn duration(&self) -> SimTime {
        from_millis_f64(self.duration_ms)
    }

    pub fn windows(&self) -> u64 {
        self.duration() / self.window_len().max(1)
    }

    /// Instance `k` is proposed by node `k`; its pivot is the next node.
    pub fn instances(&self) -> Vec<InstanceSpec> {
        let pool: Vec<NodeId> = (0..self.pool_size() as u32).map(NodeId).collect();
        (0..self.gamma as u32)
            .map(|k| InstanceSpec {
                id: k,
                proposer: NodeId(k),
                pivot: NodeId((k + 1) % self.n as u32),
                pool: pool.clone(),
                f: self.f,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.f == 0 {
            return Err(invalid("f", "must be at least 1"));
        }
        if self.n != 3 * self.f + 1 {
            return Err(invalid(
                "n",
                format!("must equal 3f+1 = {}", 3 * self.f + 1),
            ));
        }
        if self.gamma == 0 || self.gamma > self.n {
            return Err(invalid("gamma", format!("must be within 1..={}", self.n)));
        }
        if self.beta == 0 {
            return Err(invalid("beta", "must be positive"));
        }
        if self.m == 0 {
            return Err(invalid("m", "must be positive"));
        }
        if !(self.delta_ms > 0.0) || self.window_len() == 0 {
            return Err(invalid("delta_ms", "must be positive"));
        }
        if !(self.duration_ms >= 0.0) || self.duration() % self.window_len() != 0 {
            return Err(invalid(
                "duration_ms",
                "must be a non-negative multiple of delta_ms",
            ));
        }
        if !(self.warmup_ms >= 0.0) || self.warmup_ms > self.duration_ms {
            return Err(invalid("warmup_ms", "must lie within the run"));
        }
        if !(self.drain_ms >= 0.0) {
            return Err(invalid("drain_ms", "must be non-negative"));
        }
        if !(self.tau_ms >= 0.0) {
            return Err(invalid("tau_ms", "must be non-negative"));
        }
        if !(self.ping_ms >= 0.0) {
            return Err(invalid("ping_ms", "must be non-negative"));
        }
        if self.fanout == 0 {
            return Err(invalid("fanout", "must be positive"));
        }
        if self.retry_cap == 0 {
            return Err(invalid("retry_cap", "must be positive"));
        }
        match self.workload {
            WorkloadMode::Saturation { max_inflight } if max_inflight == 0 => {
                return Err(invalid("workload", "max_inflight must be positive"))
            }
            WorkloadMode::Rate { batches_per_sec } if !(batches_per_sec > 0.0) => {
                return Err(invalid("workload", "batches_per_sec must be positive"))
            }
            _ => {}
        }
        self.sim.validate().map_err(|r| invalid("sim", r))?;
        let total = self.total_nodes() as u32;
        let mut seen = BTreeSet::new();
        for p in &self.byzantine {
            if p.node_id.0 >= total {
                return Err(invalid(
                    "byzantine",
                    format!("unknown node {}", p.node_id.0),
                ));
            }
            if !seen.insert(p.node_id) {
                return Err(invalid(
                    "byzantine",
                    format!("node {} listed twice", p.node_id.0),
                ));
            }
        }
        let mut last = 0.0;
        for e in &self.churn {
            if e.node_id.0 >= total {
                return Err(invalid("churn", format!("unknown node {}", e.node_id.0)));
            }
            if !(e.time_ms >= last) {
                return Err(invalid("churn", "events must be sorted by time"));
            }
            last = e.time_ms;
        }
        Ok(())
    }

    /// Replaces `members` booth vehicles every window: the spare group and a
    /// group of initial vehicles alternate being down. Sets `spares` to match.
    pub fn with_window_churn(mut self, members: usize) -> Self {
        self.spares = members;
        self.churn = window_churn(&self, members);
        self
    }
}

/// Per-window swap of `members` pool nodes. At time 0 the spares go down;
/// at every later window boundary the down group comes back and the other
/// group goes down, so each window runs on a different booth.
pub fn window_churn(spec: &RunSpec, members: usize) -> Vec<ChurnEvent> {
    if members == 0 || spec.window_len() == 0 {
        return Vec::new();
    }
    let pinned: BTreeSet<NodeId> = spec
        .instances()
        .iter()
        .flat_map(|i| [i.proposer, i.pivot])
        .collect();
    let spares: Vec<NodeId> = (spec.n as u32..(spec.n + members) as u32)
        .map(NodeId)
        .collect();
    let rotating: Vec<NodeId> = (0..spec.n as u32)
        .map(NodeId)
        .filter(|id| !pinned.contains(id))
        .take(members)
        .collect();
    let groups = [spares, rotating];
    let mut events = Vec::new();
    let down = |events: &mut Vec<ChurnEvent>, t: f64, g: &[NodeId], status| {
        events.extend(g.iter().map(|&node_id| ChurnEvent {
            time_ms: t,
            node_id,
            status,
        }));
    };
    down(&mut events, 0.0, &groups[0], Status::Down);
    for k in 1..spec.windows() {
        let t = k as f64 * spec.delta_ms;
        let (back, away) = (&groups[(k as usize + 1) % 2], &groups[k as usize % 2]);
        down(&mut events, t, back, Status::Up);
        down(&mut events, t, away, Status::Down);
    }
    events
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(values: &mut [f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let r = ((p / 100.0) * values.len() as f64).ceil() as usize;
            values[r.clamp(1, values.len()) - 1]
        };
        Self {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p50: rank(50.0),
            p95: rank(95.0),
            p99: rank(99.0),
        }
    }
}

/// Copies sent per protocol round, over all instances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageSummary {
    pub ordering_rounds: usize,
    pub ordering_max: u64,
    pub ordering_mean: f64,
    pub consensus_rounds: usize,
    pub consensus_max: u64,
    pub consensus_mean: f64,
    pub total_copies: u64,
    pub total_bytes: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub per_kind: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunChecks {
    /// Correct nodes agree on every ordering id and every window.
    pub total_order: bool,
    /// No correct node saw a second batch offered for an ordered id.
    pub no_duplicate_ids: bool,
    /// Every correct ledger passes its audit.
    pub chain_verified: bool,
    /// Correct proposers' ledgers tile `[0, duration)`.
    pub tiling: bool,
    /// Committed batches were all proposed, and every batch ordered within
    /// the tiled span is committed.
    pub validity: bool,
    pub failures: Vec<String>,
}

impl Default for RunChecks {
    fn default() -> Self {
        Self {
            total_order: true,
            no_duplicate_ids: true,
            chain_verified: true,
            tiling: true,
            validity: true,
            failures: Vec::new(),
        }
    }
}

impl RunChecks {
    pub fn ok(&self) -> bool {
        self.total_order
            && self.no_duplicate_ids
            && self.chain_verified
            && self.tiling
            && self.validity
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n: usize,
    pub f: usize,
    pub beta: usize,
    pub m: usize,
    pub delta_ms: f64,
    pub gamma: usize,
    pub seed: u64,
    pub duration_ms: f64,
    pub ordering_tps: f64,
    pub consensus_tps: f64,
    pub ordering_latency_ms: Percentiles,
    pub consensus_latency_ms: Percentiles,
    pub ordered_entries: u64,
    pub committed_entries: u64,
    pub windows: u64,
    pub committed_windows: u64,
    pub booth_changes: u64,
    pub ordering_booth_changes: u64,
    pub messages: MessageSummary,
    pub equivocations: Vec<Equivocation>,
    pub checks: RunChecks,
    pub counters: BTreeMap<String, u64>,
    pub ok: bool,
    pub window_log: Vec<WindowLine>,
}

/// The flat subset of a report written as one CSV row.
#[derive(Clone, Debug, Serialize)]
pub struct CsvRow<'a> {
    pub axis: &'a str,
    pub value: String,
    pub n: usize,
    pub f: usize,
    pub beta: usize,
    pub m: usize,
    pub delta_ms: f64,
    pub gamma: usize,
    pub seed: u64,
    pub ordering_tps: f64,
    pub consensus_tps: f64,
    pub ordering_p50_ms: f64,
    pub ordering_p95_ms: f64,
    pub ordering_p99_ms: f64,
    pub consensus_p50_ms: f64,
    pub consensus_p95_ms: f64,
    pub consensus_p99_ms: f64,
    pub ordering_msgs_per_instance: f64,
    pub consensus_msgs_per_instance: f64,
    pub booth_changes: u64,
    pub windows: u64,
    pub committed_windows: u64,
    pub ok: bool,
    pub error: String,
}

impl RunReport {
    pub fn csv_row<'a>(&self, axis: &'a str, value: String) -> CsvRow<'a> {
        CsvRow {
            axis,
            value,
            n: self.n,
            f: self.f,
            beta: self.beta,
            m: self.m,
            delta_ms: self.delta_ms,
            gamma: self.gamma,
            seed: self.seed,
            ordering_tps: self.ordering_tps,
            consensus_tps: self.consensus_tps,
            ordering_p50_ms: self.ordering_latency_ms.p50,
            ordering_p95_ms: self.ordering_latency_ms.p95,
            ordering_p99_ms: self.ordering_latency_ms.p99,
            consensus_p50_ms: self.consensus_latency_ms.p50,
            consensus_p95_ms: self.consensus_latency_ms.p95,
            consensus_p99_ms: self.consensus_latency_ms.p99,
            ordering_msgs_per_instance: self.messages.ordering_mean,
            consensus_msgs_per_instance: self.messages.consensus_mean,
            booth_changes: self.booth_changes,
            windows: self.windows,
            committed_windows: self.committed_windows,
            ok: self.ok,
            error: String::new(),
        }
    }

    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self.csv_row("", String::new()))?;
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn empty(spec: &RunSpec) -> Self {
        Self {
            n: spec.n,
            f: spec.f,
            beta: spec.beta,
            m: spec.m,
            delta_ms: spec.delta_ms,
            gamma: spec.gamma,
            seed: spec.seed,
            duration_ms: spec.duration_ms,
            ok: true,
            ..Default::default()
        }
    }
}

/// A finished simulation, kept around for ledger export and inspection.
pub struct Run {
    pub spec: RunSpec,
    pub report: RunReport,
    pub sim: Sim,
}

impl Run {
    pub fn node(&self, id: NodeId) -> &Node {
        self.sim.node(id)
    }

    /// Nodes that behave as specified.
    pub fn correct_nodes(&self) -> impl Iterator<Item = &Node> {
        self.sim.nodes().iter().filter(|n| !n.is_byzantine())
    }

    /// Per-window tx hashes of a node's ledger for `instance`.
    pub fn tx_hashes(&self, id: NodeId, instance: u32) -> BTreeMap<SimTime, crate::crypto::Digest> {
        self.node(id)
            .instance_state(instance)
            .map(|(_, l)| l.tx_hashes())
            .unwrap_or_default()
    }

    /// Nodes holding `instance` commits in their gossiper store.
    pub fn gossip_stored(&self, instance: u32) -> BTreeSet<NodeId> {
        self.sim
            .nodes()
            .iter()
            .filter(|n| {
                n.storage
                    .smi(instance, Role::Gossiper)
                    .is_some_and(|s| s.temp_len() + s.perm_len() > 0)
            })
            .map(|n| n.id)
            .collect()
    }
}

pub fn run(spec: &RunSpec) -> Result<RunReport, HarnessError> {
    run_full(spec).map(|r| r.report)
}

fn identity_seed(seed: u64, node: u32) -> [u8; 32] {
    HashAlg::Sha256
        .tuple("harness/identity")
        .u64(seed)
        .u64(node as u64)
        .finish()
        .0
}

/// Builds every node and the network for `spec` without running anything.
pub fn build(spec: &RunSpec) -> Result<Sim, HarnessError> {
    let (nodes, net_config) = assemble(spec)?;
    let total = nodes.len() as u32;
    let net = Network::new(net_config, spec.cost.clone(), (0..total).map(NodeId));
    let mut sim = Sim::new(nodes, net, spec.cost.clone(), spec.alg, spec.trace);
    for e in &spec.churn {
        sim.schedule_churn(from_millis_f64(e.time_ms), e.node_id, e.status);
    }
    Ok(sim)
}

/// Validates `spec` and creates its nodes, indexed by id, along with the
/// network configuration under the run's derived seed.
pub fn assemble(spec: &RunSpec) -> Result<(Vec<Node>, SimConfig), HarnessError> {
    spec.validate()?;
    let total = spec.total_nodes() as u32;
    let instances = spec.instances();
    let proposers: BTreeSet<NodeId> = instances.iter().map(|i| i.proposer).collect();
    let pivots: BTreeSet<NodeId> = instances.iter().map(|i| i.pivot).collect();
    let keys: Vec<IdentityKey> = (0..total)
        .map(|i| IdentityKey::from_seed(NodeId(i), identity_seed(spec.seed, i)))
        .collect();
    let directory: Arc<Directory> = Arc::new(
        keys.iter()
            .map(|k| {
                let id = k.node_id();
                let hint = if proposers.contains(&id) {
                    RoleHint::ProposerCapable
                } else if pivots.contains(&id) {
                    RoleHint::Pivot
                } else {
                    RoleHint::Vehicle
                };
                (id, k.identity(hint))
            })
            .collect(),
    );
    let dealer = Arc::new(Dealer::new());
    let window_len = spec.window_len();
    let duration = spec.duration();
    let config = Arc::new(NodeConfig {
        alg: spec.alg,
        window_len,
        batch_size: spec.beta,
        entry_size: spec.m,
        workload: spec.workload,
        propose_until: duration,
        tick_until: duration,
        ping_period: from_millis_f64(spec.ping_ms),
        cleanup_period: 0,
        ordering: OrderingConfig {
            timeout: spec.ordering_timeout.clone(),
            retry_cap: spec.retry_cap,
        },
        consensus: ConsensusConfig {
            timeout: spec.consensus_timeout.clone(),
        },
        gossip: GossipConfig {
            enabled: spec.gossip,
            lifetime: spec.lifetime,
            fanout: spec.fanout,
            ..GossipConfig::default()
        },
        retention: RetentionPolicy::Timed {
            tau: from_millis_f64(spec.tau_ms),
        },
        seed: spec.seed,
    });
    let mut mmu_config = MmuConfig::new(spec.f);
    mmu_config.policy = spec.policy;
    let adjacency = spec.topology.adjacency(total);
    let behaviors: BTreeMap<NodeId, BTreeSet<Behavior>> = spec
        .byzantine
        .iter()
        .map(|p| (p.node_id, p.behaviors.clone()))
        .collect();
    let nodes: Vec<Node> = keys
        .into_iter()
        .map(|key| {
            let id = key.node_id();
            Node::new(
                key,
                directory.clone(),
                dealer.clone(),
                config.clone(),
                &instances,
                &mmu_config,
                adjacency.get(&id).cloned().unwrap_or_default(),
                behaviors.get(&id).cloned().unwrap_or_default(),
            )
        })
        .collect();
    let mut sim_config = spec.sim.clone();
    sim_config.seed = sub_seed(spec.seed, "harness/net", spec.sim.seed, 0);
    Ok((nodes, sim_config))
}

/// Runs `spec` to completion and audits the result.
pub fn run_full(spec: &RunSpec) -> Result<Run, HarnessError> {
    let mut sim = build(spec)?;
    if spec.duration() == 0 {
        return Ok(Run {
            spec: spec.clone(),
            report: RunReport::empty(spec),
            sim,
        });
    }
    sim.run_until(spec.duration() + from_millis_f64(spec.drain_ms));
    let report = report(spec, sim.nodes(), sim.stats());
    Ok(Run {
        spec: spec.clone(),
        report,
        sim,
    })
}

/// Builds the report for finished nodes and their transport counters.
pub fn report(spec: &RunSpec, nodes: &[Node], stats: &MsgStats) -> RunReport {
    let mut r = RunReport::empty(spec);
    let warmup = from_millis_f64(spec.warmup_ms);
    let duration = spec.duration();
    let span = (duration - warmup) as f64 / NANOS_PER_SEC as f64;
    let mut ordering_lat = Vec::new();
    let mut consensus_lat = Vec::new();
    let mut counters = crate::engine::Counters::default();
    for node in nodes {
        counters.merge(&node.counters);
        for side in node.proposing.values() {
            let m = &side.metrics;
            for s in m
                .ordered
                .iter()
                .filter(|s| s.at >= warmup && s.at < duration)
            {
                r.ordered_entries += s.entries as u64;
                ordering_lat.push(as_millis_f64(s.latency));
            }
            for s in m.committed.iter().filter(|s| s.at >= warmup) {
                consensus_lat.push(as_millis_f64(s.latency));
            }
            for w in m.windows.iter().filter(|w| w.ts < duration) {
                if w.committed {
                    r.committed_windows += 1;
                    if w.ts >= warmup {
                        r.committed_entries += w.entries as u64;
                    }
                }
            }
            r.booth_changes += m.consensus_booth_changes;
            r.ordering_booth_changes += m.ordering_booth_changes;
            r.window_log.extend(m.windows.iter().cloned());
            r.equivocations.extend(side.equivocations());
        }
    }
    r.windows = spec.windows() * spec.gamma as u64;
    if span > 0.0 {
        r.ordering_tps = r.ordered_entries as f64 / span;
        r.consensus_tps = r.committed_entries as f64 / span;
    }
    r.ordering_latency_ms = Percentiles::of(&mut ordering_lat);
    r.consensus_latency_ms = Percentiles::of(&mut consensus_lat);
    r.messages = message_summary(stats);
    r.counters = counters.0;
    r.checks = audit(spec, nodes);
    r.ok = r.checks.ok();
    r
}

fn message_summary(stats: &MsgStats) -> MessageSummary {
    let mut s = MessageSummary {
        total_copies: stats.total_copies(),
        total_bytes: stats.bytes.values().sum(),
        delivered: stats.delivered,
        dropped: stats.dropped,
        per_kind: stats
            .copies
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        ..Default::default()
    };
    let (mut o_sum, mut c_sum) = (0u64, 0u64);
    for ((_, round), &count) in &stats.per_round {
        match round {
            RoundKey::Ordering(_) => {
                s.ordering_rounds += 1;
                s.ordering_max = s.ordering_max.max(count);
                o_sum += count;
            }
            RoundKey::Consensus(_) => {
                s.consensus_rounds += 1;
                s.consensus_max = s.consensus_max.max(count);
                c_sum += count;
            }
        }
    }
    if s.ordering_rounds > 0 {
        s.ordering_mean = o_sum as f64 / s.ordering_rounds as f64;
    }
    if s.consensus_rounds > 0 {
        s.consensus_mean = c_sum as f64 / s.consensus_rounds as f64;
    }
    s
}

/// Post-run safety audit over every correct node.
pub fn audit(spec: &RunSpec, nodes: &[Node]) -> RunChecks {
    let mut c = RunChecks::default();
    let cache = VerifyCache::new();
    let duration = spec.duration();
    let correct: Vec<&Node> = nodes.iter().filter(|n| !n.is_byzantine()).collect();
    for node in &correct {
        let dups: u64 = node
            .counters
            .0
            .iter()
            .filter(|(k, _)| k.ends_with("DuplicateOrderingId"))
            .map(|(_, v)| v)
            .sum();
        if dups > 0 {
            c.no_duplicate_ids = false;
            c.failures
                .push(format!("node {}: {dups} duplicate ordering ids", node.id.0));
        }
    }
    for spec_i in spec.instances() {
        let instance = spec_i.id;
        let mut by_id: BTreeMap<u64, (NodeId, crate::crypto::Digest)> = BTreeMap::new();
        let mut by_ts: BTreeMap<SimTime, (NodeId, crate::crypto::Digest)> = BTreeMap::new();
        for node in &correct {
            let Some((log, ledger)) = node.instance_state(instance) else {
                continue;
            };
            for e in log.iter() {
                let (first, h) = *by_id
                    .entry(e.ordering_id)
                    .or_insert((node.id, e.batch.batch_hash));
                if h != e.batch.batch_hash {
                    c.total_order = false;
                    c.failures.push(format!(
                        "instance {instance}: id {} differs between nodes {} and {}",
                        e.ordering_id, first.0, node.id.0
                    ));
                }
            }
            for (ts, h) in ledger.tx_hashes() {
                let (first, prev) = *by_ts.entry(ts).or_insert((node.id, h));
                if prev != h {
                    c.total_order = false;
                    c.failures.push(format!(
                        "instance {instance}: window {ts} differs between nodes {} and {}",
                        first.0, node.id.0
                    ));
                }
            }
            let proposer = node.id == spec_i.proposer;
            let audit = if proposer {
                ledger.verify_chain(&cache)
            } else {
                ledger.verify_records(&cache)
            };
            if let Err(v) = audit {
                c.chain_verified = false;
                c.failures
                    .push(format!("instance {instance}: node {}: {v}", node.id.0));
            }
        }
        let proposer = &nodes[spec_i.proposer.0 as usize];
        let Some(side) = proposer.proposing.get(&instance) else {
            continue;
        };
        if proposer.is_byzantine() {
            continue;
        }
        let tiled = side.ledger.tiled_until();
        if tiled < duration {
            c.tiling = false;
            c.failures.push(format!(
                "instance {instance}: ledger tiles only [0, {tiled})"
            ));
        }
        let journal = side.ordering.journal();
        let committed = side.ledger.committed_ids();
        for (_, commit_tx) in side.ledger.data_chain().map(|(tx, c)| (c, tx)) {
            for e in &commit_tx.entries {
                if !journal.contains_key(&e.batch.batch_hash) {
                    c.validity = false;
                    c.failures.push(format!(
                        "instance {instance}: committed batch {} never proposed",
                        e.ordering_id
                    ));
                }
            }
        }
        for e in side.log.iter() {
            let appended = side.log.appended_at(e.ordering_id).unwrap_or(SimTime::MAX);
            if appended < tiled && !committed.contains(&e.ordering_id) {
                c.validity = false;
                c.failures.push(format!(
                    "instance {instance}: ordered id {} left uncommitted",
                    e.ordering_id
                ));
            }
        }
    }
    c
}

/// Sweepable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Beta,
    M,
    /// Mean network delay in ms.
    Delay,
    Gamma,
    /// Members replaced every window.
    Churn,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::M => "m",
            Axis::Delay => "delay",
            Axis::Gamma => "gamma",
            Axis::Churn => "churn",
        }
    }

    pub fn apply(self, spec: &RunSpec, value: f64) -> RunSpec {
        let mut s = spec.clone();
        match self {
            Axis::Beta => s.beta = value as usize,
            Axis::M => s.m = value as usize,
            Axis::Delay => s.sim.delay.mean_ms = value,
            Axis::Gamma => s.gamma = value as usize,
            Axis::Churn => s = s.with_window_churn(value as usize),
        }
        s
    }
}

/// One run per value, all with the base seed. Failing cells are reported
/// in place and the sweep continues.
pub fn sweep(
    spec: &RunSpec,
    axis: Axis,
    values: &[f64],
) -> Vec<(f64, Result<RunReport, HarnessError>)> {
    values
        .iter()
        .map(|&v| (v, run(&axis.apply(spec, v))))
        .collect()
}

pub fn write_sweep_csv(
    axis: Axis,
    cells: &[(f64, Result<RunReport, HarnessError>)],
    out: impl Write,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (v, cell) in cells {
        let row = match cell {
            Ok(r) => r.csv_row(axis.name(), v.to_string()),
            Err(e) => {
                let mut row = RunReport::default().csv_row(axis.name(), v.to_string());
                row.error = e.to_string();
                row
            }
        };
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Nodes within `depth` tree hops of `root` that gossip would reach: the
/// root skips `excluded` neighbors, everyone else forwards to all but the
/// sender.
pub fn gossip_reach(
    adj: &BTreeMap<NodeId, Vec<NodeId>>,
    root: NodeId,
    excluded: &BTreeSet<NodeId>,
    depth: u32,
) -> BTreeSet<NodeId> {
    let mut reached = BTreeSet::new();
    let mut visited: BTreeSet<NodeId> = [root].into_iter().collect();
    let mut queue: VecDeque<(NodeId, u32)> = adj
        .get(&root)
        .into_iter()
        .flatten()
        .filter(|p| !excluded.contains(p))
        .map(|&p| (p, 1))
        .collect();
    while let Some((v, d)) = queue.pop_front() {
        if d > depth || !visited.insert(v) {
            continue;
        }
        reached.insert(v);
        for &p in adj.get(&v).into_iter().flatten() {
            if !visited.contains(&p) {
                queue.push_back((p, d + 1));
            }
        }
    }
    reached
}
