//! Single-threaded discrete-event scheduler that runs every node over the
//! simulated network.
//!
//! Each node has one execution lane per traffic class. A lane handles one
//! input at a time and is busy for the CPU time its handler charged. Sends
//! leave through a per-lane egress link that serializes copies back to back,
//! so a node flooding one class does not stall the others.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::cost::CostModel;
use crate::crypto::{HashAlg, NodeId, VerifyCache};
use crate::engine::{Ctx, Lane, Timer};
use crate::mmu::Status;
use crate::netsim::{DropReason, Network, Trace, TraceEvent, TraceKind};
use crate::node::{Input, Node};
use crate::time::SimTime;
use crate::wire::{Envelope, RoundKey};

const LANES: usize = 4;

#[derive(Debug)]
enum EventKind {
    Churn {
        node: NodeId,
        status: Status,
    },
    Deliver {
        from: NodeId,
        to: NodeId,
        envelope: Arc<Envelope>,
        bytes: usize,
    },
    Timer {
        node: NodeId,
        timer: Timer,
    },
    LaneFree {
        node: NodeId,
        lane: Lane,
    },
}

impl EventKind {
    /// Same-time ordering: availability changes first, lane wake-ups last.
    fn priority(&self) -> u8 {
        match self {
            EventKind::Churn { .. } => 0,
            EventKind::Deliver { .. } | EventKind::Timer { .. } => 1,
            EventKind::LaneFree { .. } => 2,
        }
    }
}

#[derive(Debug)]
struct Event {
    at: SimTime,
    priority: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.priority, other.seq).cmp(&(self.at, self.priority, self.seq))
    }
}

#[derive(Default)]
struct LaneState {
    busy_until: SimTime,
    egress_free: SimTime,
    scheduled: bool,
    inbox: VecDeque<(Input, usize)>,
}

/// Transport counters: copies sent per protocol round and per message kind.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MsgStats {
    #[serde(skip)]
    pub per_round: BTreeMap<(u32, RoundKey), u64>,
    pub copies: BTreeMap<&'static str, u64>,
    pub bytes: BTreeMap<&'static str, u64>,
    pub dropped: u64,
    pub delivered: u64,
}

impl MsgStats {
    pub fn sent(&mut self, env: &Envelope, bytes: usize) {
        let name = env.msg.name();
        *self.copies.entry(name).or_default() += 1;
        *self.bytes.entry(name).or_default() += bytes as u64;
        if let Some(r) = env.msg.round() {
            *self.per_round.entry((env.instance, r)).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &MsgStats) {
        for (k, v) in &other.per_round {
            *self.per_round.entry(*k).or_default() += v;
        }
        for (k, v) in &other.copies {
            *self.copies.entry(k).or_default() += v;
        }
        for (k, v) in &other.bytes {
            *self.bytes.entry(k).or_default() += v;
        }
        self.dropped += other.dropped;
        self.delivered += other.delivered;
    }

    pub fn total_copies(&self) -> u64 {
        self.copies.values().sum()
    }
}

pub struct Sim {
    nodes: Vec<Node>,
    lanes: Vec<[LaneState; LANES]>,
    net: Network,
    cost: CostModel,
    cache: VerifyCache,
    alg: HashAlg,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: SimTime,
    stats: MsgStats,
    trace: Option<Trace>,
}

impl Sim {
    /// `nodes[i]` must have id `i`.
    pub fn new(nodes: Vec<Node>, net: Network, cost: CostModel, alg: HashAlg, trace: bool) -> Self {
        for (i, n) in nodes.iter().enumerate() {
            assert_eq!(n.id, NodeId(i as u32), "nodes must be indexed by id");
        }
        let lanes = nodes.iter().map(|_| Default::default()).collect();
        let mut sim = Self {
            nodes,
            lanes,
            net,
            cost,
            cache: VerifyCache::new(),
            alg,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            stats: MsgStats::default(),
            trace: trace.then(Trace::default),
        };
        for i in 0..sim.nodes.len() {
            let node = sim.nodes[i].id;
            for (at, timer) in sim.nodes[i].initial_timers() {
                sim.push(at, EventKind::Timer { node, timer });
            }
        }
        sim
    }

    fn push(&mut self, at: SimTime, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            at,
            priority: kind.priority(),
            seq: self.seq,
            kind,
        });
    }

    /// Schedules a node going down or coming back at `at`.
    pub fn schedule_churn(&mut self, at: SimTime, node: NodeId, status: Status) {
        self.push(at, EventKind::Churn { node, status });
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn stats(&self) -> &MsgStats {
        &self.stats
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    pub fn cache(&self) -> &VerifyCache {
        &self.cache
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Processes every event scheduled at or before `end`.
    pub fn run_until(&mut self, end: SimTime) {
        while self.heap.peek().is_some_and(|e| e.at <= end) {
            let ev = self.heap.pop().expect("peeked");
            self.now = ev.at;
            self.dispatch(ev.kind);
        }
        self.now = self.now.max(end);
    }

    fn dispatch(&mut self, kind: EventKind) {
        let now = self.now;
        match kind {
            EventKind::Churn { node, status } => {
                self.net.set_down(node, status == Status::Down);
                for n in &mut self.nodes {
                    n.on_churn(node, status, now);
                }
            }
            EventKind::Deliver {
                from,
                to,
                envelope,
                bytes,
            } => {
                if self.net.is_down(to) {
                    self.stats.dropped += 1;
                    self.record(
                        TraceKind::Drop,
                        from,
                        to,
                        &envelope,
                        bytes,
                        Some(DropReason::ReceiverDown),
                    );
                    return;
                }
                self.stats.delivered += 1;
                self.record(TraceKind::Deliver, from, to, &envelope, bytes, None);
                let lane = envelope.lane();
                let envelope = Arc::unwrap_or_clone(envelope);
                self.lanes[to.0 as usize][lane.index()]
                    .inbox
                    .push_back((Input::Message { from, envelope }, bytes));
                self.try_run(to, lane);
            }
            EventKind::Timer { node, timer } => {
                let lane = timer.lane();
                self.lanes[node.0 as usize][lane.index()]
                    .inbox
                    .push_back((Input::Timer(timer), 0));
                self.try_run(node, lane);
            }
            EventKind::LaneFree { node, lane } => {
                self.lanes[node.0 as usize][lane.index()].scheduled = false;
                self.try_run(node, lane);
            }
        }
    }

    fn try_run(&mut self, node: NodeId, lane: Lane) {
        let now = self.now;
        let state = &self.lanes[node.0 as usize][lane.index()];
        if state.scheduled {
            return;
        }
        if state.busy_until <= now && !state.inbox.is_empty() {
            self.process(node, lane);
        }
        let state = &mut self.lanes[node.0 as usize][lane.index()];
        if !state.scheduled && !state.inbox.is_empty() {
            state.scheduled = true;
            let at = state.busy_until.max(now);
            self.push(at, EventKind::LaneFree { node, lane });
        }
    }

    fn process(&mut self, node: NodeId, lane: Lane) {
        let idx = node.0 as usize;
        let state = &mut self.lanes[idx][lane.index()];
        let (input, bytes) = state.inbox.pop_front().expect("caller checked");
        let start = state.busy_until.max(self.now);
        let mut ctx = Ctx::new(start, node, self.alg, &self.cost, &self.cache);
        ctx.egress_backlog = state.egress_free.saturating_sub(start);
        if matches!(input, Input::Message { .. }) {
            ctx.charge(self.cost.recv_overhead_ns);
            ctx.charge_codec(bytes);
        }
        let fx = self.nodes[idx].step(ctx, input);
        let finish = start + fx.charged;
        self.lanes[idx][lane.index()].busy_until = finish;
        for (after, timer) in fx.timers {
            self.push(start + after, EventKind::Timer { node, timer });
        }
        for out in fx.out {
            let env = Arc::new(out.envelope);
            let bytes = env.encode_to_bytes().len();
            let out_lane = env.lane();
            let wire = self.cost.wire(bytes);
            for to in out.to {
                let egress = &mut self.lanes[idx][out_lane.index()].egress_free;
                *egress = (*egress).max(finish) + wire;
                let depart = *egress;
                self.stats.sent(&env, bytes);
                self.record_at(depart, TraceKind::Send, node, to, &env, bytes, None);
                match self.net.route(depart, node, to, out_lane, bytes) {
                    Ok(Ok(arrivals)) => {
                        for at in arrivals {
                            self.push(
                                at,
                                EventKind::Deliver {
                                    from: node,
                                    to,
                                    envelope: env.clone(),
                                    bytes,
                                },
                            );
                        }
                    }
                    Ok(Err(reason)) => {
                        self.stats.dropped += 1;
                        self.record_at(
                            depart,
                            TraceKind::Drop,
                            node,
                            to,
                            &env,
                            bytes,
                            Some(reason),
                        );
                    }
                    Err(_) => {
                        self.stats.dropped += 1;
                        self.nodes[idx].counters.bump("net.unknown_endpoint");
                    }
                }
            }
        }
    }

    fn record(
        &mut self,
        kind: TraceKind,
        from: NodeId,
        to: NodeId,
        env: &Envelope,
        bytes: usize,
        reason: Option<DropReason>,
    ) {
        self.record_at(self.now, kind, from, to, env, bytes, reason);
    }

    #[allow(clippy::too_many_arguments)]
    fn record_at(
        &mut self,
        t: SimTime,
        kind: TraceKind,
        from: NodeId,
        to: NodeId,
        env: &Envelope,
        bytes: usize,
        reason: Option<DropReason>,
    ) {
        if let Some(trace) = &mut self.trace {
            trace.events.push(TraceEvent {
                t,
                kind,
                from,
                to,
                instance: env.instance,
                msg: env.msg.name(),
                bytes,
                reason,
            });
        }
    }
}
