//! Wall-clock benchmark mode: one thread per node, message passing over
//! channels, link delays and loss sampled per sender, real CPU time instead
//! of the cost model. Results vary run to run; correctness suites use the
//! discrete-event scheduler instead.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use crate::cost::CostModel;
use crate::crypto::{NodeId, VerifyCache};
use crate::engine::{Ctx, Timer};
use crate::harness::{self, HarnessError, RunReport, RunSpec};
use crate::mmu::Status;
use crate::netsim::{Network, SimConfig};
use crate::node::{Input, Node};
use crate::sim::MsgStats;
use crate::time::{from_millis_f64, SimTime};
use crate::wire::Envelope;

struct Packet {
    at: SimTime,
    from: NodeId,
    envelope: Arc<Envelope>,
}

enum Item {
    Packet(Packet),
    Timer(Timer),
    Churn(NodeId, Status),
}

/// Time-ordered local work, FIFO among equal times.
#[derive(Default)]
struct Agenda {
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    items: BTreeMap<u64, Item>,
    seq: u64,
}

impl Agenda {
    fn push(&mut self, at: SimTime, item: Item) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq)));
        self.items.insert(self.seq, item);
    }

    fn next_at(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse((at, _))| *at)
    }

    fn pop(&mut self) -> Option<Item> {
        let Reverse((_, seq)) = self.heap.pop()?;
        self.items.remove(&seq)
    }
}

/// Runs `spec` in real time and reports like the reference mode, with the
/// same post-run audits.
pub fn run(spec: &RunSpec) -> Result<RunReport, HarnessError> {
    let (nodes, net_config) = harness::assemble(spec)?;
    let end = spec.duration() + from_millis_f64(spec.drain_ms);
    if spec.duration() == 0 {
        return Ok(harness::report(spec, &nodes, &MsgStats::default()));
    }
    let total = nodes.len();
    let (txs, rxs): (Vec<Sender<Packet>>, Vec<Receiver<Packet>>) =
        (0..total).map(|_| mpsc::channel()).unzip();
    let churn: Vec<(SimTime, NodeId, Status)> = spec
        .churn
        .iter()
        .map(|e| (from_millis_f64(e.time_ms), e.node_id, e.status))
        .collect();
    let barrier = Arc::new(Barrier::new(total));
    let handles: Vec<_> = nodes
        .into_iter()
        .zip(rxs)
        .map(|(node, rx)| {
            let txs = txs.clone();
            let churn = churn.clone();
            let barrier = barrier.clone();
            let net_config = net_config.clone();
            let cost = spec.cost.clone();
            thread::spawn(move || node_loop(node, rx, txs, churn, net_config, cost, end, barrier))
        })
        .collect();
    drop(txs);
    let mut nodes = Vec::with_capacity(total);
    let mut stats = MsgStats::default();
    for h in handles {
        let (node, s) = h.join().expect("node thread panicked");
        stats.merge(&s);
        nodes.push(node);
    }
    Ok(harness::report(spec, &nodes, &stats))
}

#[allow(clippy::too_many_arguments)]
fn node_loop(
    mut node: Node,
    rx: Receiver<Packet>,
    txs: Vec<Sender<Packet>>,
    churn: Vec<(SimTime, NodeId, Status)>,
    net_config: SimConfig,
    cost: CostModel,
    end: SimTime,
    barrier: Arc<Barrier>,
) -> (Node, MsgStats) {
    let me = node.id;
    let alg = node.config().alg;
    // Each sender samples its own outgoing links; link RNGs are keyed by
    // (from, to, lane), so this matches a shared network.
    let mut net = Network::new(net_config, cost.clone(), (0..txs.len() as u32).map(NodeId));
    let cache = VerifyCache::new();
    let mut stats = MsgStats::default();
    let mut queue = Agenda::default();
    for (at, timer) in node.initial_timers() {
        queue.push(at, Item::Timer(timer));
    }
    for &(at, id, status) in &churn {
        queue.push(at, Item::Churn(id, status));
    }
    barrier.wait();
    let start = Instant::now();
    let clock = || start.elapsed().as_nanos() as SimTime;
    loop {
        let now = clock();
        if now >= end {
            break;
        }
        while let Ok(p) = rx.try_recv() {
            queue.push(p.at, Item::Packet(p));
        }
        let due = queue.next_at().is_some_and(|at| at <= now);
        if !due {
            let next = queue.next_at().unwrap_or(end).min(end);
            match rx.recv_timeout(Duration::from_nanos(next.saturating_sub(now))) {
                Ok(p) => queue.push(p.at, Item::Packet(p)),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            continue;
        }
        let item = queue.pop().expect("due");
        let input = match item {
            Item::Churn(id, status) => {
                net.set_down(id, status == Status::Down);
                node.on_churn(id, status, now);
                continue;
            }
            Item::Timer(t) => Input::Timer(t),
            Item::Packet(p) => {
                if net.is_down(me) {
                    stats.dropped += 1;
                    continue;
                }
                stats.delivered += 1;
                Input::Message {
                    from: p.from,
                    envelope: Arc::unwrap_or_clone(p.envelope),
                }
            }
        };
        let ctx = Ctx::new(now, me, alg, &cost, &cache);
        let fx = node.step(ctx, input);
        let done = clock();
        for (after, timer) in fx.timers {
            queue.push(now + after, Item::Timer(timer));
        }
        for out in fx.out {
            let env = Arc::new(out.envelope);
            let bytes = env.encode_to_bytes().len();
            let lane = env.lane();
            for to in out.to {
                stats.sent(&env, bytes);
                match net.route(done, me, to, lane, bytes) {
                    Ok(Ok(arrivals)) => {
                        for at in arrivals {
                            // A closed channel means that node already stopped.
                            let _ = txs[to.0 as usize].send(Packet {
                                at,
                                from: me,
                                envelope: env.clone(),
                            });
                        }
                    }
                    _ => stats.dropped += 1,
                }
            }
        }
    }
    (node, stats)
}
