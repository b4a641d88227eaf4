//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero if any fails.
//!
//! Run everything with `cargo test --test acceptance`, or pick criteria by
//! number: `cargo test --test acceptance -- 1 5 9`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vguard_core::crypto::{AggregateSignature, Digest, HashAlg, NodeId, Signature, VerifyCache};
use vguard_core::harness::{self, Axis, Run, RunSpec, Topology};
use vguard_core::ledger::{CommitRecord, DataBatch, LogEntry, Transaction};
use vguard_core::mmu::BoothPolicy;
use vguard_core::netsim::{DelayDist, Gst, SimConfig};
use vguard_core::node::{Behavior, ByzantineProfile, WorkloadMode};
use vguard_core::storage::{Layer, RetentionPolicy, Role, Smi, StoredTx};
use vguard_core::time::{millis, SimTime};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "safety under chaos and byzantine nodes", safety),
    (2, "equivocated ordering ids never conflict", equivocation),
    (3, "liveness after global stabilization", liveness),
    (4, "committed windows tile the run", tiling),
    (5, "linear message complexity", messages),
    (6, "batch size sweep peaks in the interior", batch_sweep),
    (7, "churn sensitivity", churn),
    (
        8,
        "split consensus booths commit the reference ledger",
        cross_booth,
    ),
    (9, "gossip reach matches tree depth", gossip),
    (
        10,
        "storage layers stay exclusive with exact retention",
        storage,
    ),
    (11, "runs are deterministic", determinism),
];

fn main() {
    let picked: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for &(id, name, check) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {status} {name} ({secs:.1}s): {}",
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

/// Small batches at a fixed offered rate keep each run to a fraction of a
/// second while still exercising many ordering and consensus instances.
fn light(n: usize, f: usize, seed: u64) -> RunSpec {
    RunSpec {
        n,
        f,
        beta: 20,
        m: 32,
        delta_ms: 50.0,
        duration_ms: 300.0,
        drain_ms: 2000.0,
        seed,
        workload: WorkloadMode::Rate {
            batches_per_sec: 100.0,
        },
        ..RunSpec::default()
    }
}

/// Random delays, loss, duplication and reordering plus up to `f`
/// misbehaving nodes. The pivot of instance 0 always stays honest.
fn chaos(n: usize, f: usize, seed: u64) -> RunSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a0_5eed);
    let mut spec = light(n, f, seed);
    spec.spares = rng.gen_range(0..=1);
    spec.sim = SimConfig {
        seed,
        delay: DelayDist {
            mean_ms: rng.gen_range(1.0..20.0),
            sd_ms: rng.gen_range(0.0..10.0),
        },
        drop_rate: rng.gen_range(0.0..0.05),
        dup_rate: rng.gen_range(0.0..0.1),
        reorder: rng.gen_bool(0.5),
        ..SimConfig::default()
    };
    let instance = &spec.instances()[0];
    let (proposer, pivot) = (instance.proposer, instance.pivot);
    let mut candidates: Vec<NodeId> = (0..n as u32)
        .map(NodeId)
        .filter(|&id| id != pivot)
        .collect();
    candidates.shuffle(&mut rng);
    let faulty = rng.gen_range(0..=f);
    for &node_id in &candidates[..faulty] {
        let behavior = if node_id == proposer {
            *[
                Behavior::Silent,
                Behavior::TamperPayload,
                Behavior::ForgeQuorum,
                Behavior::EquivocateOrderingId,
            ]
            .choose(&mut rng)
            .expect("non-empty")
        } else {
            *[Behavior::Silent, Behavior::TamperPayload]
                .choose(&mut rng)
                .expect("non-empty")
        };
        if behavior == Behavior::EquivocateOrderingId {
            // A second booth has to exist to equivocate into.
            spec.spares = 1;
        }
        spec.byzantine.push(ByzantineProfile {
            node_id,
            behaviors: BTreeSet::from([behavior]),
        });
    }
    spec
}

fn safety() -> Verdict {
    let mut failures = Vec::new();
    let mut runs = 0;
    let mut faulty_runs = 0;
    let mut committed = 0u64;
    for (n, f, base) in [(4, 1, 0u64), (7, 2, 1_000_000)] {
        for i in 0..500 {
            let spec = chaos(n, f, base + i);
            faulty_runs += usize::from(!spec.byzantine.is_empty());
            match harness::run(&spec) {
                Ok(r) => {
                    runs += 1;
                    committed += r.committed_entries;
                    let c = &r.checks;
                    if !(c.total_order && c.no_duplicate_ids && c.chain_verified) {
                        failures.push(format!("n={n} seed {}: {:?}", spec.seed, c.failures));
                    }
                }
                Err(e) => failures.push(format!("n={n} seed {}: {e}", spec.seed)),
            }
        }
    }
    let detail = format!(
        "{runs} runs ({faulty_runs} with byzantine nodes), {committed} entries committed, {} violations{}",
        failures.len(),
        failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
    );
    Verdict::new(failures.is_empty(), detail)
}

fn full(spec: &RunSpec) -> Result<Run, String> {
    harness::run_full(spec).map_err(|e| format!("seed {}: {e}", spec.seed))
}

fn first_failure(failures: &[String]) -> String {
    failures
        .first()
        .map(|f| format!("; first: {f}"))
        .unwrap_or_default()
}

/// Every node's exported ledgers, concatenated in id order.
fn ledger_bytes(run: &Run) -> Vec<u8> {
    let mut out = Vec::new();
    for node in run.sim.nodes() {
        for instance in 0..run.spec.gamma as u32 {
            if let Some((_, ledger)) = node.instance_state(instance) {
                ledger.export_jsonl(&mut out).expect("in-memory write");
            }
        }
    }
    out
}

fn equivocation() -> Verdict {
    let mut failures = Vec::new();
    let (mut shadows, mut runs) = (0, 0);
    for seed in 0..100 {
        let mut spec = light(4, 1, 20_000 + seed);
        spec.spares = 1;
        spec.sim.delay = DelayDist {
            mean_ms: 5.0,
            sd_ms: 2.0,
        };
        spec.sim.seed = seed;
        spec.byzantine.push(ByzantineProfile {
            node_id: NodeId(0),
            behaviors: BTreeSet::from([Behavior::EquivocateOrderingId]),
        });
        let run = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        runs += 1;
        let r = &run.report;
        if !(r.checks.total_order && r.checks.no_duplicate_ids) {
            failures.push(format!("seed {}: {:?}", spec.seed, r.checks.failures));
        }
        for e in &r.equivocations {
            shadows += 1;
            if e.shadow_ordered {
                failures.push(format!(
                    "seed {}: shadow of id {} reached a quorum",
                    spec.seed, e.id
                ));
            }
            for node in run.correct_nodes() {
                let Some((log, _)) = node.instance_state(0) else {
                    continue;
                };
                if log
                    .get(e.id)
                    .is_some_and(|entry| entry.batch.batch_hash == e.shadow_batch)
                {
                    failures.push(format!(
                        "seed {}: node {} appended the shadow of id {}",
                        spec.seed, node.id.0, e.id
                    ));
                }
            }
        }
    }
    let pass = failures.is_empty() && shadows > 0;
    Verdict::new(
        pass,
        format!(
            "{runs} runs, {shadows} equivocated ids, all timed out unordered: {}{}",
            failures.is_empty(),
            first_failure(&failures)
        ),
    )
}

fn liveness() -> Verdict {
    const WINDOWS_AFTER_GST: u64 = 10;
    let mut failures = Vec::new();
    let (mut checked, mut worst) = (0usize, 0u64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x957);
        let gst_ms = rng.gen_range(200..=500) as f64;
        let mut spec = RunSpec {
            delta_ms: 100.0,
            duration_ms: 800.0,
            drain_ms: 3000.0,
            retry_cap: u32::MAX,
            workload: WorkloadMode::Rate {
                batches_per_sec: 50.0,
            },
            ..light(4, 1, 30_000 + seed)
        };
        spec.sim = SimConfig {
            seed,
            delay: DelayDist {
                mean_ms: rng.gen_range(50.0..300.0),
                sd_ms: rng.gen_range(20.0..200.0),
            },
            dup_rate: rng.gen_range(0.0..0.1),
            reorder: true,
            gst: Some(Gst {
                at_ms: gst_ms,
                bound_ms: 20.0,
            }),
            ..SimConfig::default()
        };
        let run = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        let gst = millis(gst_ms as u64);
        let deadline = gst + WINDOWS_AFTER_GST * spec.window_len();
        let closed: BTreeMap<SimTime, SimTime> = run
            .report
            .window_log
            .iter()
            .filter(|w| w.committed)
            .map(|w| (w.ts, w.closed_at))
            .collect();
        let side = &run.node(NodeId(0)).proposing[&0];
        let mut committed_in: BTreeMap<Digest, SimTime> = BTreeMap::new();
        for (tx, _) in side.ledger.data_chain() {
            for e in &tx.entries {
                committed_in.insert(e.batch.batch_hash, tx.window_start);
            }
        }
        for (batch, &proposed) in side.ordering.journal() {
            if proposed >= gst {
                continue;
            }
            checked += 1;
            match committed_in.get(batch).and_then(|ts| closed.get(ts)) {
                Some(&at) if at <= deadline => {
                    worst = worst.max(at.saturating_sub(gst) / spec.window_len())
                }
                Some(&at) => failures.push(format!(
                    "seed {}: batch proposed at {proposed} committed at {at}, after {deadline}",
                    spec.seed
                )),
                None => failures.push(format!(
                    "seed {}: batch proposed at {proposed} never committed",
                    spec.seed
                )),
            }
        }
    }
    Verdict::new(
        failures.is_empty() && checked > 0,
        format!(
            "{checked} pre-stabilization batches, all committed within {worst} windows after it: {}{}",
            failures.is_empty(),
            first_failure(&failures)
        ),
    )
}

fn tiling() -> Verdict {
    let cache = VerifyCache::new();
    let mut failures = Vec::new();
    let mut runs = 0;
    for seed in 0..100u64 {
        let mut spec = chaos(4, 1, 40_000 + seed);
        // A faulty proposer owes nobody a complete ledger.
        spec.byzantine.retain(|p| p.node_id != NodeId(0));
        if seed % 2 == 1 {
            spec = spec.with_window_churn(1);
        }
        let run = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        runs += 1;
        let ledger = &run.node(NodeId(0)).proposing[&0].ledger;
        if let Err(v) = ledger.verify_chain(&cache) {
            failures.push(format!("seed {}: {v}", spec.seed));
        }
        if ledger.tiled_until() < spec.duration() || !run.report.checks.tiling {
            failures.push(format!(
                "seed {}: tiles only [0, {})",
                spec.seed,
                ledger.tiled_until()
            ));
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{runs} runs, {} gaps{}",
            failures.len(),
            first_failure(&failures)
        ),
    )
}

/// Least-squares line through the points; returns the largest residual
/// relative to the observed value.
fn linear_fit_error(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / k, sy / k);
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    points
        .iter()
        .map(|(x, y)| ((slope * x + icpt) - y).abs() / y)
        .fold(0.0, f64::max)
}

fn messages() -> Verdict {
    let mut failures = Vec::new();
    let (mut ordering, mut consensus) = (Vec::new(), Vec::new());
    let mut lines = Vec::new();
    for (n, f) in [(4usize, 1usize), (7, 2), (13, 4)] {
        let mut spec = light(n, f, 50_000 + n as u64);
        spec.sim.delay = DelayDist {
            mean_ms: 2.0,
            sd_ms: 0.5,
        };
        let report = match harness::run(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        let m = &report.messages;
        let bound = 3 * (n as u64 - 1);
        if m.ordering_rounds == 0 || m.consensus_rounds == 0 {
            failures.push(format!("n={n}: no completed instances"));
        }
        if m.ordering_max > bound {
            failures.push(format!(
                "n={n}: ordering instance used {} messages",
                m.ordering_max
            ));
        }
        if m.consensus_max > bound {
            failures.push(format!(
                "n={n}: consensus instance used {} messages",
                m.consensus_max
            ));
        }
        ordering.push((n as f64, m.ordering_mean));
        consensus.push((n as f64, m.consensus_mean));
        lines.push(format!(
            "n={n}: {:.1}/{:.1} (bound {bound})",
            m.ordering_mean, m.consensus_mean
        ));
    }
    let fit = linear_fit_error(&ordering).max(linear_fit_error(&consensus));
    if !(fit <= 0.05) {
        failures.push(format!("linear fit off by {:.1}%", fit * 100.0));
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "per-instance ordering/consensus {}; fit error {:.2}%{}",
            lines.join(", "),
            fit * 100.0,
            first_failure(&failures)
        ),
    )
}

fn batch_sweep() -> Verdict {
    let betas = [100.0, 1000.0, 2000.0, 3000.0, 4000.0, 5000.0];
    let base = RunSpec {
        seed: 60_000,
        ..RunSpec::default()
    };
    let mut tps = Vec::new();
    for (beta, cell) in harness::sweep(&base, Axis::Beta, &betas) {
        match cell {
            Ok(r) if r.ok => tps.push(r.consensus_tps),
            Ok(r) => return Verdict::new(false, format!("beta={beta}: {:?}", r.checks.failures)),
            Err(e) => return Verdict::new(false, format!("beta={beta}: {e}")),
        }
    }
    let peak = (0..tps.len())
        .max_by(|&a, &b| tps[a].total_cmp(&tps[b]))
        .expect("non-empty");
    let interior = peak > 0 && peak + 1 < tps.len();
    let gains: Vec<f64> = (1..=peak)
        .map(|i| (tps[i] - tps[i - 1]) / (betas[i] - betas[i - 1]))
        .collect();
    let diminishing = gains.windows(2).all(|w| w[1] < w[0]) && gains.iter().all(|g| *g > 0.0);
    let declining = tps[peak..].windows(2).all(|w| w[1] < w[0]);
    let curve: Vec<String> = betas
        .iter()
        .zip(&tps)
        .map(|(b, t)| format!("{b}:{t:.0}"))
        .collect();
    Verdict::new(
        interior && diminishing && declining,
        format!(
            "tps by beta [{}]; peak at {}; marginal gains {:?} diminishing: {diminishing}; declines after peak: {declining}",
            curve.join(" "),
            betas[peak],
            gains.iter().map(|g| g.round()).collect::<Vec<_>>()
        ),
    )
}

fn churn() -> Verdict {
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for seed in [70_000u64, 70_001, 70_002] {
        let mut base = RunSpec {
            seed,
            ..RunSpec::default()
        };
        base.sim.seed = seed;
        base.sim.delay = DelayDist {
            mean_ms: 10.0,
            sd_ms: 5.0,
        };
        let mut p50 = Vec::new();
        for (c, cell) in harness::sweep(&base, Axis::Churn, &[0.0, 1.0, 2.0]) {
            match cell {
                Ok(r) if r.ok => p50.push(r.consensus_latency_ms.p50),
                Ok(r) => failures.push(format!("seed {seed} c={c}: {:?}", r.checks.failures)),
                Err(e) => failures.push(format!("seed {seed} c={c}: {e}")),
            }
        }
        let [s, low, high] = p50[..] else { continue };
        if (low - s).abs() > 0.10 * s {
            failures.push(format!(
                "seed {seed}: c=1 median {low:.1} ms vs static {s:.1} ms"
            ));
        }
        if high < 1.25 * s {
            failures.push(format!(
                "seed {seed}: c=2 median {high:.1} ms vs static {s:.1} ms"
            ));
        }
        lines.push(format!("{s:.0}/{low:.0}/{high:.0}"));
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "median consensus ms static/c=1/c=2 per seed: {}{}",
            lines.join(", "),
            first_failure(&failures)
        ),
    )
}

fn cross_booth() -> Verdict {
    let mut failures = Vec::new();
    let mut windows = 0;
    for seed in 0..50u64 {
        let mut spec = light(4, 1, 80_000 + seed);
        spec.spares = 1;
        spec.sim.seed = seed;
        spec.sim.delay = DelayDist {
            mean_ms: 3.0,
            sd_ms: 0.0,
        };
        spec.policy = BoothPolicy::Shared;
        let reference = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        spec.policy = BoothPolicy::SplitConsensus;
        let split = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        let side = &split.node(NodeId(0)).proposing[&0];
        for (tx, commit) in side.ledger.data_chain() {
            if tx.booth_refs().contains(&commit.booth_ref) {
                failures.push(format!(
                    "seed {seed}: window {} committed in its ordering booth",
                    tx.window_start
                ));
            }
        }
        let (a, b) = (
            reference.tx_hashes(NodeId(0), 0),
            split.tx_hashes(NodeId(0), 0),
        );
        windows += a.len();
        if a.is_empty() || a != b {
            failures.push(format!(
                "seed {seed}: ledgers differ ({} vs {} windows)",
                a.len(),
                b.len()
            ));
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "50 run pairs, {windows} windows compared, {} mismatches{}",
            failures.len(),
            first_failure(&failures)
        ),
    )
}

fn gossip() -> Verdict {
    let mut failures = Vec::new();
    let mut cases = 0;
    for topo in 0..20u64 {
        let lifetime = 1 + (topo % 3) as u32;
        let mut spec = light(4, 1, 90_000 + topo);
        spec.vehicles = 16;
        spec.topology = Topology::RandomTree { seed: topo };
        spec.gossip = true;
        spec.lifetime = lifetime;
        spec.fanout = 64;
        spec.sim.delay = DelayDist {
            mean_ms: 2.0,
            sd_ms: 1.0,
        };
        let on = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        let adj = spec.topology.adjacency(spec.total_nodes() as u32);
        let booth: BTreeSet<NodeId> = (0..spec.pool_size() as u32).map(NodeId).collect();
        let expected = harness::gossip_reach(&adj, NodeId(0), &booth, lifetime);
        let stored = on.gossip_stored(0);
        if stored != expected {
            failures.push(format!(
                "tree {topo} lifetime {lifetime}: stored {stored:?}, oracle {expected:?}"
            ));
        }
        spec.gossip = false;
        let off = match full(&spec) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        if ledger_bytes(&on) != ledger_bytes(&off) {
            failures.push(format!("tree {topo}: gossip changed a ledger"));
        }
        cases += 1;
    }
    Verdict::new(
        failures.is_empty(),
        format!("{cases} trees, stored sets equal the BFS oracle and gossip-off ledgers are identical: {}{}", failures.is_empty(), first_failure(&failures)),
    )
}

fn stored_tx(k: u64) -> StoredTx {
    let batch = Arc::new(DataBatch::new(
        k,
        8,
        Bytes::from(k.to_le_bytes().to_vec()),
        HashAlg::Sha256,
    ));
    let cert = AggregateSignature {
        threshold: 0,
        sig_bytes: [0; 48],
        signer_set_digest: Digest::ZERO,
    };
    let entry = LogEntry {
        ordering_id: k,
        batch,
        quorum: Default::default(),
        booth_ref: Digest::ZERO,
        cert,
        proposer_sig: Signature([0; 64]),
        replies: Vec::new(),
    };
    let tx = Arc::new(Transaction::new(
        k * 10,
        10,
        vec![Arc::new(entry)],
        HashAlg::Sha256,
    ));
    StoredTx {
        commit: CommitRecord {
            ts: k * 10,
            quorum: Default::default(),
            booth_ref: Digest::ZERO,
            cert,
            tx_hash: tx.tx_hash,
        },
        tx,
    }
}

#[derive(Clone, Debug)]
enum StorageOp {
    Register(usize, SimTime),
    Move(usize),
    Delete(usize),
    Cleanup(SimTime),
}

fn storage_op() -> impl Strategy<Value = StorageOp> {
    prop_oneof![
        (0..6usize, 0..50u64).prop_map(|(k, dt)| StorageOp::Register(k, dt)),
        (0..6usize).prop_map(StorageOp::Move),
        (0..6usize).prop_map(StorageOp::Delete),
        (0..120u64).prop_map(StorageOp::Cleanup),
    ]
}

fn storage() -> Verdict {
    const CASES: u32 = 10_000;
    let txs: Vec<StoredTx> = (0..6).map(stored_tx).collect();
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (prop::collection::vec(storage_op(), 1..80), 1..100u64);
    let result = runner.run(&strategy, |(ops, tau)| {
        let mut smi = Smi::new(Role::Gossiper, RetentionPolicy::Timed { tau });
        // Reference model: hash -> (layer, registration time in temp).
        let mut model: BTreeMap<Digest, (Layer, SimTime)> = BTreeMap::new();
        let mut clock = 0;
        for op in ops {
            match op {
                StorageOp::Register(k, dt) => {
                    clock += dt;
                    let h = txs[k].hash();
                    let got = smi.register_to_temp(txs[k].clone(), clock);
                    match model.get(&h) {
                        Some((Layer::Perm, _)) => prop_assert!(got.is_err()),
                        Some((Layer::Temp, _)) => prop_assert_eq!(got, Ok(false)),
                        None => {
                            prop_assert_eq!(got, Ok(true));
                            model.insert(h, (Layer::Temp, clock));
                        }
                    }
                }
                StorageOp::Move(k) => {
                    let h = txs[k].hash();
                    let got = smi.move_to_perm(&h);
                    match model.get_mut(&h) {
                        Some(entry) if entry.0 == Layer::Temp => {
                            prop_assert!(got.is_ok());
                            entry.0 = Layer::Perm;
                        }
                        _ => prop_assert!(got.is_err()),
                    }
                }
                StorageOp::Delete(k) => {
                    let h = txs[k].hash();
                    let got = smi.delete_perm(&h);
                    if model.get(&h).is_some_and(|e| e.0 == Layer::Perm) {
                        prop_assert!(got.is_ok());
                        model.remove(&h);
                    } else {
                        prop_assert!(got.is_err());
                    }
                }
                StorageOp::Cleanup(dt) => {
                    clock += dt;
                    let expired: Vec<Digest> = model
                        .iter()
                        .filter(|(_, (layer, at))| *layer == Layer::Temp && clock - at >= tau)
                        .map(|(h, _)| *h)
                        .collect();
                    prop_assert_eq!(smi.cleanup_temp(clock), expired.len());
                    for h in expired {
                        model.remove(&h);
                    }
                }
            }
            for t in &txs {
                let h = t.hash();
                let want = model.get(&h).map(|e| e.0);
                prop_assert_eq!(smi.layer_of(&h), want);
                if let Some((Layer::Temp, at)) = model.get(&h) {
                    prop_assert_eq!(smi.registered_at(&h), Some(*at));
                }
            }
            let temp = model.values().filter(|e| e.0 == Layer::Temp).count();
            prop_assert_eq!(smi.temp_len(), temp);
            prop_assert_eq!(smi.perm_len(), model.len() - temp);
        }
        Ok(())
    });
    match result {
        Ok(()) => Verdict::new(
            true,
            format!("{CASES} generated sequences agree with the reference model"),
        ),
        Err(e) => Verdict::new(false, e.to_string()),
    }
}

fn determinism() -> Verdict {
    let mut failures = Vec::new();
    let seeds: Vec<(usize, usize, u64)> = (0..15)
        .map(|i| (4, 1, i))
        .chain((0..5).map(|i| (7, 2, 1_000_000 + i)))
        .collect();
    for &(n, f, seed) in &seeds {
        let spec = chaos(n, f, seed);
        match (full(&spec), full(&spec)) {
            (Ok(a), Ok(b)) => {
                if ledger_bytes(&a) != ledger_bytes(&b) || a.report.to_json() != b.report.to_json()
                {
                    failures.push(format!("n={n} seed {seed}: outputs differ"));
                }
            }
            (Err(e), _) | (_, Err(e)) => failures.push(e),
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{} safety-suite runs repeated, {} differed{}",
            seeds.len(),
            failures.len(),
            first_failure(&failures)
        ),
    )
}
