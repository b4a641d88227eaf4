//! Ordering phase: every batch gets a unique id endorsed by a booth quorum.
//!
//! The proposer runs many instances at once and never waits for earlier
//! ones. Finalized entries are released into its log strictly in id order,
//! skipping retired ids, so each consensus window covers a contiguous id
//! range that validators can rebuild from their own logs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booth::{Booth, BoothBook, Directory, Quorum};
use crate::crypto::{
    aggregate, AggregateError, Digest, IdentityKey, NodeId, PartialSignature, Signature,
};
use crate::engine::{Ctx, Timer};
use crate::ledger::{
    ordering_digest, quorum_fits, DataBatch, LedgerError, LogEntry, OrderLog, QuorumFault,
};
use crate::mmu::{BoothKind, Dealer, Mmu};
use crate::time::{millis, SimTime};
use crate::wire::{Envelope, Message, Order, PoReply, PreOrder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeoutPolicy {
    pub rtt_factor: f64,
    pub min: SimTime,
    pub max: SimTime,
    /// Ceiling for timeouts stretched by repeated failures.
    pub backoff_limit: SimTime,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        Self {
            rtt_factor: 4.0,
            min: millis(20),
            max: millis(200),
            backoff_limit: millis(3200),
        }
    }
}

impl TimeoutPolicy {
    /// Round-trip allowance for a booth; unknown latency gets the maximum.
    pub fn for_rtt(&self, rtt: Option<f64>) -> SimTime {
        match rtt {
            Some(r) => ((r * self.rtt_factor) as SimTime).clamp(self.min, self.max),
            None => self.max,
        }
    }

    /// Like [`Self::for_rtt`], doubled for every earlier failed attempt up
    /// to `backoff_limit`, so retries outlast slow but bounded links.
    pub fn for_attempt(&self, rtt: Option<f64>, attempt: u32) -> SimTime {
        let base = self.for_rtt(rtt);
        (base << attempt.min(16)).min(self.backoff_limit.max(base))
    }
}

/// Exponentially weighted round-trip estimate.
pub(crate) fn smooth(prev: Option<f64>, sample: f64) -> f64 {
    const ALPHA: f64 = 0.25;
    prev.map_or(sample, |p| ALPHA * sample + (1.0 - ALPHA) * p)
}

/// The more pessimistic of two optional round-trip estimates.
pub(crate) fn slower(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderingConfig {
    pub timeout: TimeoutPolicy,
    /// Attempts per batch before it is parked and an alarm raised.
    pub retry_cap: u32,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        Self {
            timeout: TimeoutPolicy::default(),
            retry_cap: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum OrderingReject {
    #[error("message not sent by this instance's proposer")]
    NotFromProposer,
    #[error("booth malformed or not matching the instance")]
    BadBooth,
    #[error("receiver is not a booth member")]
    NotMember,
    #[error("batch or booth hash does not recompute")]
    BadHash,
    #[error("proposer signature invalid")]
    BadSig,
    #[error("ordering id already used for different content")]
    ReusedId,
    #[error("no such ordering instance")]
    UnknownInstance,
    #[error("instance was aborted")]
    StaleInstance,
    #[error("reply signer is not a booth validator")]
    ForeignSigner,
    #[error("reply signature or share invalid")]
    InvalidReplySig,
    #[error("order without a matching pre-order")]
    NoPending,
    #[error("certificate does not verify")]
    BadCert,
    #[error("quorum does not match the certificate signers")]
    QuorumMismatch,
    #[error("quorum names a node outside the booth")]
    ForeignQuorumMember,
    #[error("quorum lacks the pivot")]
    PivotMissing,
    #[error("log already holds a different batch for this id")]
    DuplicateOrderingId,
}

impl OrderingReject {
    pub fn name(self) -> &'static str {
        match self {
            Self::NotFromProposer => "NotFromProposer",
            Self::BadBooth => "BadBooth",
            Self::NotMember => "NotMember",
            Self::BadHash => "BadHash",
            Self::BadSig => "BadSig",
            Self::ReusedId => "ReusedId",
            Self::UnknownInstance => "UnknownInstance",
            Self::StaleInstance => "StaleInstance",
            Self::ForeignSigner => "ForeignSigner",
            Self::InvalidReplySig => "InvalidReplySig",
            Self::NoPending => "NoPending",
            Self::BadCert => "BadCert",
            Self::QuorumMismatch => "QuorumMismatch",
            Self::ForeignQuorumMember => "ForeignQuorumMember",
            Self::PivotMissing => "PivotMissing",
            Self::DuplicateOrderingId => "DuplicateOrderingId",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    PreOrdering,
    Ordered,
}

#[derive(Clone, Debug)]
pub struct OrderingInstance {
    pub id: u64,
    /// Pinned for the instance's lifetime.
    pub booth: Arc<Booth>,
    pub batch: Arc<DataBatch>,
    pub digest: Digest,
    pub proposer_sig: Signature,
    /// Accepted replies in arrival order.
    pub replies: Vec<PartialSignature>,
    /// Signers whose share failed aggregation; ignored from then on.
    pub excluded: BTreeSet<NodeId>,
    pub state: InstanceState,
    pub retry_count: u32,
    pub proposed_at: SimTime,
    /// When this id was sent out, as opposed to when its batch first was.
    pub launched_at: SimTime,
}

impl OrderingInstance {
    fn has_signer(&self, id: NodeId) -> bool {
        self.replies.iter().any(|r| r.signer == id)
    }
}

/// A log entry the proposer appended, with when its batch was first proposed.
#[derive(Clone, Debug)]
pub struct Released {
    pub entry: Arc<LogEntry>,
    pub proposed_at: SimTime,
}

#[derive(Clone, Debug)]
struct Waiting {
    batch: Arc<DataBatch>,
    retry_count: u32,
    proposed_at: SimTime,
}

/// Proposer side of the ordering phase for one instance.
#[derive(Debug)]
pub struct OrderingProposer {
    instance: u32,
    config: OrderingConfig,
    next_id: u64,
    instances: BTreeMap<u64, OrderingInstance>,
    retired: BTreeSet<u64>,
    ready: BTreeMap<u64, Arc<LogEntry>>,
    release_next: u64,
    waiting: VecDeque<Waiting>,
    parked: Vec<Arc<DataBatch>>,
    /// Every batch hash ever proposed, with its first proposal time.
    journal: BTreeMap<Digest, SimTime>,
    /// Smoothed launch-to-quorum time. Unlike ping round trips it includes
    /// the validators' queueing, so timeouts stretch when they fall behind.
    observed_rtt: Option<f64>,
}

impl OrderingProposer {
    pub fn new(instance: u32, config: OrderingConfig) -> Self {
        Self {
            instance,
            config,
            next_id: 0,
            instances: BTreeMap::new(),
            retired: BTreeSet::new(),
            ready: BTreeMap::new(),
            release_next: 0,
            waiting: VecDeque::new(),
            parked: Vec::new(),
            journal: BTreeMap::new(),
            observed_rtt: None,
        }
    }

    pub fn config(&self) -> &OrderingConfig {
        &self.config
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn instance(&self, id: u64) -> Option<&OrderingInstance> {
        self.instances.get(&id)
    }

    pub fn retired(&self) -> &BTreeSet<u64> {
        &self.retired
    }

    pub fn journal(&self) -> &BTreeMap<Digest, SimTime> {
        &self.journal
    }

    pub fn parked(&self) -> &[Arc<DataBatch>] {
        &self.parked
    }

    /// Batches in flight or waiting for a booth.
    pub fn inflight(&self) -> usize {
        self.waiting.len()
            + self
                .instances
                .values()
                .filter(|i| i.state == InstanceState::PreOrdering)
                .count()
    }

    /// Batches waiting for a valid booth.
    pub fn waiting(&self) -> usize {
        self.waiting.len()
    }

    /// Ordered but not yet released because an earlier id is still open.
    pub fn unreleased(&self) -> usize {
        self.ready.len()
    }

    /// Starts ordering a new batch. Returns the assigned id, or `None` if no
    /// booth is available and the batch waits.
    pub fn propose(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
        batch: Arc<DataBatch>,
    ) -> Option<u64> {
        self.journal.entry(batch.batch_hash).or_insert(ctx.now);
        let waiting = Waiting {
            batch,
            retry_count: 0,
            proposed_at: ctx.now,
        };
        self.launch(ctx, mmu, booths, key, waiting)
    }

    fn launch(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
        w: Waiting,
    ) -> Option<u64> {
        let Some(booth) = mmu.current_booth(BoothKind::Ordering) else {
            self.waiting.push_back(w);
            return None;
        };
        let booth = booths.insert(booth);
        let id = self.next_id;
        self.next_id += 1;
        let digest = ordering_digest(ctx.alg, id, &w.batch.batch_hash, &booth.booth_hash);
        let proposer_sig = ctx.sign(key, &digest);
        let recipients: Vec<NodeId> = booth.validators().collect();
        let wire_bytes = w.batch.payload_bytes() + 256 * booth.size();
        ctx.send(
            recipients.clone(),
            Envelope::new(
                self.instance,
                Message::PreOrder(PreOrder {
                    id,
                    batch: w.batch.clone(),
                    booth: booth.clone(),
                    booth_hash: booth.booth_hash,
                    proposer_sig,
                }),
            ),
        );
        let drain = ctx.egress_backlog + ctx.cost.wire(wire_bytes) * recipients.len() as SimTime;
        let rtt = slower(mmu.booth_rtt(&booth), self.observed_rtt);
        let after = ctx.charged() + drain + self.config.timeout.for_attempt(rtt, w.retry_count);
        ctx.set_timer(
            after,
            Timer::OrderingTimeout {
                instance: self.instance,
                id,
            },
        );
        self.instances.insert(
            id,
            OrderingInstance {
                id,
                booth,
                batch: w.batch,
                digest,
                proposer_sig,
                replies: Vec::new(),
                excluded: BTreeSet::new(),
                state: InstanceState::PreOrdering,
                retry_count: w.retry_count,
                proposed_at: w.proposed_at,
                launched_at: ctx.now,
            },
        );
        Some(id)
    }

    /// Relaunches batches that were waiting for a booth.
    pub fn resume(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
    ) -> usize {
        let mut launched = 0;
        while let Some(w) = self.waiting.pop_front() {
            if self.launch(ctx, mmu, booths, key, w).is_none() {
                break;
            }
            launched += 1;
        }
        launched
    }

    /// Counts one reply; finalizes once `2f` replies including the pivot's
    /// are in hand. Returns entries released into the log.
    pub fn on_reply(
        &mut self,
        ctx: &mut Ctx,
        log: &mut OrderLog,
        from: NodeId,
        reply: PoReply,
    ) -> Result<Vec<Released>, OrderingReject> {
        let Some(inst) = self.instances.get_mut(&reply.id) else {
            return if self.retired.contains(&reply.id) {
                Err(OrderingReject::StaleInstance)
            } else if reply.id < self.next_id {
                // Already released; the quorum was complete without it.
                Ok(Vec::new())
            } else {
                Err(OrderingReject::UnknownInstance)
            };
        };
        if inst.state == InstanceState::Ordered {
            return Ok(Vec::new());
        }
        let p = reply.partial;
        if p.signer != from || p.signer == inst.booth.proposer || !inst.booth.contains(p.signer) {
            return Err(OrderingReject::ForeignSigner);
        }
        if inst.has_signer(p.signer) || inst.excluded.contains(&p.signer) {
            return Ok(Vec::new());
        }
        if p.payload_digest != inst.digest || p.share.is_none() {
            return Err(OrderingReject::InvalidReplySig);
        }
        let signer_key = inst
            .booth
            .member(p.signer)
            .expect("membership checked")
            .verify_key;
        if !ctx.verify(&signer_key, &inst.digest, &p.sig_bytes) {
            return Err(OrderingReject::InvalidReplySig);
        }
        inst.replies.push(p);
        self.try_finalize(ctx, log, reply.id)
    }

    fn try_finalize(
        &mut self,
        ctx: &mut Ctx,
        log: &mut OrderLog,
        id: u64,
    ) -> Result<Vec<Released>, OrderingReject> {
        let inst = self.instances.get_mut(&id).expect("caller checked");
        let need = inst.booth.quorum_size();
        let pivot = inst.booth.pivot;
        loop {
            let Some(pivot_reply) = inst.replies.iter().find(|r| r.signer == pivot) else {
                return Ok(Vec::new());
            };
            if inst.replies.len() < need {
                return Ok(Vec::new());
            }
            let mut chosen = vec![pivot_reply.clone()];
            chosen.extend(
                inst.replies
                    .iter()
                    .filter(|r| r.signer != pivot)
                    .take(need - 1)
                    .cloned(),
            );
            ctx.charge(
                ctx.cost.share_combine_ns * chosen.len() as SimTime + ctx.cost.aggregate_verify_ns,
            );
            match aggregate(&chosen, &inst.booth.verify_key) {
                Ok(cert) => {
                    let quorum: Quorum = chosen.iter().map(|r| r.signer).collect();
                    let entry = Arc::new(LogEntry {
                        ordering_id: id,
                        batch: inst.batch.clone(),
                        quorum: quorum.clone(),
                        booth_ref: inst.booth.booth_hash,
                        cert,
                        proposer_sig: inst.proposer_sig,
                        replies: chosen.iter().map(PartialSignature::without_share).collect(),
                    });
                    inst.state = InstanceState::Ordered;
                    let sample = ctx.now.saturating_sub(inst.launched_at) as f64;
                    self.observed_rtt = Some(smooth(self.observed_rtt, sample));
                    ctx.send(
                        inst.booth.validators().collect(),
                        Envelope::new(self.instance, Message::Order(Order { id, quorum, cert })),
                    );
                    self.ready.insert(id, entry);
                    return Ok(self.release(ctx, log));
                }
                Err(AggregateError::InvalidShare(bad)) => {
                    // Naming the culprit took one check per share.
                    ctx.charge(ctx.cost.aggregate_verify_ns * chosen.len() as SimTime);
                    inst.replies.retain(|r| r.signer != bad);
                    inst.excluded.insert(bad);
                }
                Err(_) => return Err(OrderingReject::InvalidReplySig),
            }
        }
    }

    /// Aborts an instance still collecting replies and retries its batch
    /// under a fresh id. No-op for ordered or already aborted instances.
    pub fn on_timeout(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
        log: &mut OrderLog,
        id: u64,
    ) -> TimeoutOutcome {
        if self
            .instances
            .get(&id)
            .is_none_or(|i| i.state != InstanceState::PreOrdering)
        {
            return TimeoutOutcome::default();
        }
        let inst = self.instances.remove(&id).expect("checked above");
        let retry = Waiting {
            batch: inst.batch,
            retry_count: inst.retry_count + 1,
            proposed_at: inst.proposed_at,
        };
        // Late replies to a retired id are recognized as stale.
        self.retired.insert(id);
        let mut outcome = TimeoutOutcome {
            aborted: true,
            ..TimeoutOutcome::default()
        };
        if retry.retry_count > self.config.retry_cap {
            self.parked.push(retry.batch);
            outcome.parked = true;
        } else {
            outcome.retried_as = self.launch(ctx, mmu, booths, key, retry);
        }
        outcome.released = self.release(ctx, log);
        outcome
    }

    fn release(&mut self, ctx: &Ctx, log: &mut OrderLog) -> Vec<Released> {
        let mut out = Vec::new();
        while self.release_next < self.next_id {
            let id = self.release_next;
            if self.retired.contains(&id) {
                self.release_next += 1;
                continue;
            }
            let Some(entry) = self.ready.remove(&id) else {
                break;
            };
            log.append_ordered(entry.clone(), ctx.now)
                .expect("proposer assigns each id once");
            let proposed_at = self
                .instances
                .remove(&id)
                .map_or(ctx.now, |i| i.proposed_at);
            out.push(Released { entry, proposed_at });
            self.release_next += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct TimeoutOutcome {
    pub aborted: bool,
    pub retried_as: Option<u64>,
    pub parked: bool,
    pub released: Vec<Released>,
}

#[derive(Clone, Debug)]
struct Pending {
    batch: Arc<DataBatch>,
    booth: Arc<Booth>,
    digest: Digest,
    proposer_sig: Signature,
}

/// Bound on remembered pre-orders whose order never arrived.
const PENDING_CAP: usize = 4096;

/// Validator side of the ordering phase for one instance.
#[derive(Debug)]
pub struct OrderingValidator {
    instance: u32,
    proposer: NodeId,
    pivot: NodeId,
    f: usize,
    pending: BTreeMap<u64, Pending>,
    /// Every id this validator endorsed, with (batch hash, booth hash).
    used: BTreeMap<u64, (Digest, Digest)>,
}

impl OrderingValidator {
    pub fn new(instance: u32, proposer: NodeId, pivot: NodeId, f: usize) -> Self {
        Self {
            instance,
            proposer,
            pivot,
            f,
            pending: BTreeMap::new(),
            used: BTreeMap::new(),
        }
    }

    pub fn endorsed(&self, id: u64) -> Option<&(Digest, Digest)> {
        self.used.get(&id)
    }

    /// Verifies a pre-order and replies with an endorsement.
    #[allow(clippy::too_many_arguments)]
    pub fn on_pre_order(
        &mut self,
        ctx: &mut Ctx,
        key: &IdentityKey,
        dealer: &Dealer,
        directory: &Directory,
        booths: &mut BoothBook,
        from: NodeId,
        msg: PreOrder,
    ) -> Result<(), OrderingReject> {
        if from != self.proposer {
            return Err(OrderingReject::NotFromProposer);
        }
        let booth = &msg.booth;
        if booth.proposer != self.proposer || booth.pivot != self.pivot {
            return Err(OrderingReject::BadBooth);
        }
        if !booth.contains(ctx.me) {
            return Err(OrderingReject::NotMember);
        }
        if msg.booth_hash != booth.booth_hash {
            return Err(OrderingReject::BadHash);
        }
        let booth = match booths.get(&booth.booth_hash) {
            Some(known) => known.clone(),
            None => {
                ctx.charge_hash(256 * booth.size());
                if !booth.well_formed(self.f, directory) {
                    return Err(OrderingReject::BadBooth);
                }
                booths.insert(msg.booth.clone())
            }
        };
        ctx.charge_hash(msg.batch.payload_bytes());
        if !msg.batch.hash_matches(ctx.alg) {
            return Err(OrderingReject::BadHash);
        }
        let digest = ordering_digest(ctx.alg, msg.id, &msg.batch.batch_hash, &booth.booth_hash);
        let proposer_key = booth.member(self.proposer).expect("well-formed").verify_key;
        if !ctx.verify(&proposer_key, &digest, &msg.proposer_sig) {
            return Err(OrderingReject::BadSig);
        }
        match self.used.get(&msg.id) {
            Some(&(h_b, h_vo)) if h_b == msg.batch.batch_hash && h_vo == booth.booth_hash => {
                // Network duplicate; the first copy was answered.
                return Ok(());
            }
            Some(_) => return Err(OrderingReject::ReusedId),
            None => {}
        }
        self.used
            .insert(msg.id, (msg.batch.batch_hash, booth.booth_hash));
        let share = dealer.share_for(ctx.me, &booth.verify_key);
        let partial = ctx.endorse(key, share.as_ref(), &digest);
        ctx.send(
            vec![self.proposer],
            Envelope::new(
                self.instance,
                Message::PoReply(PoReply {
                    id: msg.id,
                    partial,
                }),
            ),
        );
        if self.pending.len() >= PENDING_CAP {
            self.pending.pop_first();
        }
        self.pending.insert(
            msg.id,
            Pending {
                batch: msg.batch,
                booth,
                digest,
                proposer_sig: msg.proposer_sig,
            },
        );
        Ok(())
    }

    /// Verifies an order certificate and appends the entry. Returns whether
    /// the log grew.
    pub fn on_order(
        &mut self,
        ctx: &mut Ctx,
        log: &mut OrderLog,
        from: NodeId,
        msg: Order,
    ) -> Result<bool, OrderingReject> {
        if from != self.proposer {
            return Err(OrderingReject::NotFromProposer);
        }
        let Some(p) = self.pending.get(&msg.id) else {
            return if log.contains(msg.id) {
                Ok(false)
            } else {
                Err(OrderingReject::NoPending)
            };
        };
        match quorum_fits(&p.booth, &msg.quorum) {
            Ok(()) => {}
            Err(QuorumFault::Foreign) => return Err(OrderingReject::ForeignQuorumMember),
            Err(QuorumFault::PivotMissing) => return Err(OrderingReject::PivotMissing),
            Err(QuorumFault::TooSmall) => return Err(OrderingReject::QuorumMismatch),
        }
        if msg.cert.signer_set_digest != p.booth.verify_key.signer_set_digest(&msg.quorum) {
            return Err(OrderingReject::QuorumMismatch);
        }
        if !ctx.verify_aggregate(&msg.cert, &p.digest, &p.booth.verify_key, &msg.quorum) {
            return Err(OrderingReject::BadCert);
        }
        let p = self.pending.remove(&msg.id).expect("looked up above");
        let entry = Arc::new(LogEntry {
            ordering_id: msg.id,
            batch: p.batch,
            quorum: msg.quorum,
            booth_ref: p.booth.booth_hash,
            cert: msg.cert,
            proposer_sig: p.proposer_sig,
            replies: Vec::new(),
        });
        match log.append_ordered(entry, ctx.now) {
            Ok(grew) => Ok(grew),
            Err(LedgerError::DuplicateOrderingId { .. }) => {
                Err(OrderingReject::DuplicateOrderingId)
            }
            Err(LedgerError::ConflictingWindow { .. }) => {
                unreachable!("log appends never touch windows")
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::booth::fixtures::identity_key;
    use crate::cost::CostModel;
    use crate::crypto::{HashAlg, RoleHint, VerifyCache};
    use crate::engine::Effects;
    use crate::ledger::fixtures::batch;
    use crate::mmu::{MmuConfig, Status};

    /// A proposer (node 0), pivot (node 1) and validators over `n` nodes.
    pub(crate) struct Bench {
        pub cost: CostModel,
        pub cache: VerifyCache,
        pub dealer: Arc<Dealer>,
        pub directory: Directory,
        pub mmu: Mmu,
        pub booths: BoothBook,
        pub proposer: OrderingProposer,
        pub log: OrderLog,
        pub validators: BTreeMap<NodeId, (OrderingValidator, BoothBook, OrderLog)>,
        pub now: SimTime,
    }

    impl Bench {
        pub fn new(n: u32, f: usize) -> Self {
            let directory: Directory = (0..n)
                .map(|i| (NodeId(i), identity_key(i).identity(RoleHint::Vehicle)))
                .collect();
            let dealer = Arc::new(Dealer::new());
            let mut mmu = Mmu::new(
                MmuConfig::new(f),
                0,
                7,
                HashAlg::Sha256,
                NodeId(0),
                NodeId(1),
                directory.values().cloned(),
                dealer.clone(),
            );
            mmu.compose_booths(0).unwrap();
            let validators = (1..n)
                .map(|i| {
                    (
                        NodeId(i),
                        (
                            OrderingValidator::new(0, NodeId(0), NodeId(1), f),
                            BoothBook::default(),
                            OrderLog::new(),
                        ),
                    )
                })
                .collect();
            Self {
                cost: CostModel::free(),
                cache: VerifyCache::new(),
                dealer,
                directory,
                mmu,
                booths: BoothBook::default(),
                proposer: OrderingProposer::new(0, OrderingConfig::default()),
                log: OrderLog::new(),
                validators,
                now: 0,
            }
        }

        pub fn propose(&mut self, seed: u64) -> (Option<u64>, Effects) {
            let cost = self.cost.clone();
            let mut ctx = Ctx::new(self.now, NodeId(0), HashAlg::Sha256, &cost, &self.cache);
            let id = self.proposer.propose(
                &mut ctx,
                &mut self.mmu,
                &mut self.booths,
                &identity_key(0),
                batch(seed, 4),
            );
            (id, ctx.into_effects())
        }

        /// Delivers a pre-order to validator `v`, returning its reply.
        pub fn pre_order(
            &mut self,
            v: u32,
            msg: &PreOrder,
        ) -> Result<Option<PoReply>, OrderingReject> {
            let cost = self.cost.clone();
            let mut ctx = Ctx::new(self.now, NodeId(v), HashAlg::Sha256, &cost, &self.cache);
            let (val, book, _) = self.validators.get_mut(&NodeId(v)).unwrap();
            val.on_pre_order(
                &mut ctx,
                &identity_key(v),
                &self.dealer,
                &self.directory,
                book,
                NodeId(0),
                msg.clone(),
            )?;
            Ok(ctx
                .into_effects()
                .out
                .into_iter()
                .find_map(|o| match o.envelope.msg {
                    Message::PoReply(r) => Some(r),
                    _ => None,
                }))
        }

        pub fn reply(
            &mut self,
            from: u32,
            reply: PoReply,
        ) -> Result<(Vec<Released>, Effects), OrderingReject> {
            let cost = self.cost.clone();
            let mut ctx = Ctx::new(self.now, NodeId(0), HashAlg::Sha256, &cost, &self.cache);
            let released = self
                .proposer
                .on_reply(&mut ctx, &mut self.log, NodeId(from), reply)?;
            Ok((released, ctx.into_effects()))
        }

        pub fn order(&mut self, v: u32, msg: &Order) -> Result<bool, OrderingReject> {
            let cost = self.cost.clone();
            let mut ctx = Ctx::new(self.now, NodeId(v), HashAlg::Sha256, &cost, &self.cache);
            let (val, _, log) = self.validators.get_mut(&NodeId(v)).unwrap();
            val.on_order(&mut ctx, log, NodeId(0), msg.clone())
        }

        pub fn timeout(&mut self, id: u64) -> (TimeoutOutcome, Effects) {
            let cost = self.cost.clone();
            let mut ctx = Ctx::new(self.now, NodeId(0), HashAlg::Sha256, &cost, &self.cache);
            let out = self.proposer.on_timeout(
                &mut ctx,
                &mut self.mmu,
                &mut self.booths,
                &identity_key(0),
                &mut self.log,
                id,
            );
            (out, ctx.into_effects())
        }

        /// Runs one full honest instance; returns the id.
        pub fn order_batch(&mut self, seed: u64, responders: &[u32]) -> u64 {
            let (id, fx) = self.propose(seed);
            let pre = pre_order_of(&fx);
            let mut order = None;
            for &v in responders {
                let r = self.pre_order(v, &pre).unwrap().unwrap();
                let (_, fx) = self.reply(v, r).unwrap();
                order = order.or_else(|| order_of(&fx));
            }
            let order = order.expect("quorum reached");
            for v in 1..=self.validators.len() as u32 {
                if responders.contains(&v) {
                    self.order(v, &order).unwrap();
                }
            }
            id.unwrap()
        }
    }

    pub(crate) fn pre_order_of(fx: &Effects) -> PreOrder {
        fx.out
            .iter()
            .find_map(|o| match &o.envelope.msg {
                Message::PreOrder(m) => Some(m.clone()),
                _ => None,
            })
            .expect("a pre-order was sent")
    }

    pub(crate) fn order_of(fx: &Effects) -> Option<Order> {
        fx.out.iter().find_map(|o| match &o.envelope.msg {
            Message::Order(m) => Some(m.clone()),
            _ => None,
        })
    }

    #[test]
    fn back_to_back_batches_run_concurrently() {
        let mut b = Bench::new(4, 1);
        let (a, _) = b.propose(1);
        let (c, _) = b.propose(2);
        assert_eq!((a, c), (Some(0), Some(1)));
        assert_eq!(b.proposer.inflight(), 2);
    }

    #[test]
    fn honest_instance_orders_everywhere() {
        let mut b = Bench::new(4, 1);
        let id = b.order_batch(1, &[1, 2, 3]);
        assert!(b.log.contains(id));
        for (_, (_, _, log)) in &b.validators {
            assert!(log.contains(id));
        }
        let entry = b.log.get(id).unwrap();
        assert_eq!(entry.quorum.len(), 2);
        assert!(entry.quorum.contains(&NodeId(1)));
    }

    #[test]
    fn aborted_id_is_retired_and_batch_retried_under_next_id() {
        let mut b = Bench::new(4, 1);
        for seed in 0..7 {
            b.order_batch(seed, &[1, 2]);
        }
        let (id, fx) = b.propose(7);
        assert_eq!(id, Some(7));
        let first = pre_order_of(&fx);
        let (outcome, fx) = b.timeout(7);
        assert_eq!(outcome.retried_as, Some(8));
        assert!(b.proposer.retired().contains(&7));
        let retry = pre_order_of(&fx);
        assert_eq!(retry.batch.batch_hash, first.batch.batch_hash);
        // A late reply to the retired instance is stale.
        let late = b.pre_order(2, &first).unwrap().unwrap();
        assert_eq!(b.reply(2, late).err(), Some(OrderingReject::StaleInstance));
        // The retry completes and the log skips the retired id.
        for v in [1, 2] {
            let r = b.pre_order(v, &retry).unwrap().unwrap();
            b.reply(v, r).unwrap();
        }
        assert!(b.log.contains(8) && !b.log.contains(7));
        assert_eq!(b.proposer.next_id(), 9);
    }

    #[test]
    fn reused_id_with_different_batch_is_rejected() {
        let mut b = Bench::new(4, 1);
        let (_, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        assert!(b.pre_order(2, &pre).unwrap().is_some());
        let mut forged = pre.clone();
        let other = batch(99, 4);
        let digest = ordering_digest(HashAlg::Sha256, pre.id, &other.batch_hash, &pre.booth_hash);
        forged.batch = other;
        forged.proposer_sig = identity_key(0).sign_raw(&digest);
        assert_eq!(b.pre_order(2, &forged), Err(OrderingReject::ReusedId));
        // The original arriving again is a silent duplicate.
        assert_eq!(b.pre_order(2, &pre), Ok(None));
    }

    #[test]
    fn tampered_batch_is_a_bad_hash() {
        let mut b = Bench::new(4, 1);
        let (_, fx) = b.propose(1);
        let mut pre = pre_order_of(&fx);
        let mut bytes = pre.batch.payload.to_vec();
        bytes[0] ^= 1;
        pre.batch = Arc::new(DataBatch {
            payload: bytes.into(),
            ..(*pre.batch).clone()
        });
        assert_eq!(b.pre_order(1, &pre), Err(OrderingReject::BadHash));
    }

    #[test]
    fn bad_proposer_signature_is_rejected() {
        let mut b = Bench::new(4, 1);
        let (_, fx) = b.propose(1);
        let mut pre = pre_order_of(&fx);
        pre.proposer_sig = pre.proposer_sig.with_bit_flipped(3);
        assert_eq!(b.pre_order(1, &pre), Err(OrderingReject::BadSig));
    }

    #[test]
    fn finalize_waits_for_the_pivot() {
        let mut b = Bench::new(4, 1);
        let (id, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        for v in [2, 3] {
            let r = b.pre_order(v, &pre).unwrap().unwrap();
            let (released, fx) = b.reply(v, r).unwrap();
            assert!(released.is_empty() && order_of(&fx).is_none());
        }
        let r = b.pre_order(1, &pre).unwrap().unwrap();
        let (released, fx) = b.reply(1, r).unwrap();
        assert_eq!(released.len(), 1);
        let order = order_of(&fx).unwrap();
        assert_eq!(order.quorum, [NodeId(1), NodeId(2)].into_iter().collect());
        assert!(
            b.proposer.instance(id.unwrap()).is_none(),
            "released instances are dropped"
        );
    }

    #[test]
    fn duplicate_reply_counts_once() {
        let mut b = Bench::new(7, 2);
        let (_, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        let r1 = b.pre_order(1, &pre).unwrap().unwrap();
        let r2 = b.pre_order(2, &pre).unwrap().unwrap();
        b.reply(1, r1.clone()).unwrap();
        b.reply(1, r1).unwrap();
        let (released, _) = b.reply(2, r2).unwrap();
        assert!(released.is_empty(), "2 distinct of 4 needed");
    }

    #[test]
    fn reply_signed_by_someone_else_is_foreign() {
        let mut b = Bench::new(4, 1);
        let (_, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        let r = b.pre_order(2, &pre).unwrap().unwrap();
        assert_eq!(b.reply(3, r).err(), Some(OrderingReject::ForeignSigner));
    }

    #[test]
    fn corrupted_share_is_excluded_and_others_complete() {
        let mut b = Bench::new(4, 1);
        let (_, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        let mut bad = b.pre_order(2, &pre).unwrap().unwrap();
        let other = b
            .dealer
            .share_for(NodeId(2), &pre.booth.verify_key)
            .unwrap();
        bad.partial.share = Some(other.sign(&Digest::ZERO));
        let pivot = b.pre_order(1, &pre).unwrap().unwrap();
        b.reply(2, bad).unwrap();
        let (released, _) = b.reply(1, pivot).unwrap();
        assert!(released.is_empty());
        assert!(b
            .proposer
            .instance(0)
            .unwrap()
            .excluded
            .contains(&NodeId(2)));
        let r3 = b.pre_order(3, &pre).unwrap().unwrap();
        let (released, _) = b.reply(3, r3).unwrap();
        assert_eq!(
            released[0].entry.quorum,
            [NodeId(1), NodeId(3)].into_iter().collect()
        );
    }

    fn ordered_instance(b: &mut Bench) -> (PreOrder, Order) {
        let (_, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        let mut order = None;
        for v in [1, 2, 3] {
            let r = b.pre_order(v, &pre).unwrap().unwrap();
            let (_, fx) = b.reply(v, r).unwrap();
            order = order.or_else(|| order_of(&fx));
        }
        (pre, order.unwrap())
    }

    #[test]
    fn forged_foreign_quorum_member_is_rejected() {
        let mut b = Bench::new(5, 1);
        b.mmu.mark_availability(NodeId(4), Status::Down, 0).unwrap();
        let (_, mut order) = ordered_instance(&mut b);
        let victim = *order.quorum.iter().find(|id| **id != NodeId(1)).unwrap();
        order.quorum.remove(&victim);
        order.quorum.insert(NodeId(4));
        for v in [1, 2, 3] {
            assert_eq!(b.order(v, &order), Err(OrderingReject::ForeignQuorumMember));
        }
    }

    #[test]
    fn quorum_naming_a_non_signer_is_a_mismatch() {
        let mut b = Bench::new(4, 1);
        let (_, mut order) = ordered_instance(&mut b);
        let signer = *order.quorum.iter().find(|id| **id != NodeId(1)).unwrap();
        let outsider = [NodeId(2), NodeId(3)]
            .into_iter()
            .find(|id| *id != signer)
            .unwrap();
        order.quorum.remove(&signer);
        order.quorum.insert(outsider);
        assert_eq!(b.order(3, &order), Err(OrderingReject::QuorumMismatch));
    }

    #[test]
    fn order_with_corrupted_cert_is_rejected_and_duplicate_is_idempotent() {
        let mut b = Bench::new(4, 1);
        let (_, order) = ordered_instance(&mut b);
        let mut bad = order.clone();
        bad.cert.sig_bytes = b
            .dealer
            .share_for(NodeId(2), &b.mmu.queue()[0].verify_key)
            .unwrap()
            .sign(&Digest::ZERO)
            .0;
        assert_eq!(b.order(2, &bad), Err(OrderingReject::BadCert));
        assert_eq!(b.order(2, &order), Ok(true));
        assert_eq!(b.order(2, &order), Ok(false));
    }

    #[test]
    fn order_before_pre_order_has_nothing_pending() {
        let mut b = Bench::new(4, 1);
        let (_, order) = ordered_instance(&mut b);
        let fresh = OrderingValidator::new(0, NodeId(0), NodeId(1), 1);
        b.validators.get_mut(&NodeId(2)).unwrap().0 = fresh;
        b.validators.get_mut(&NodeId(2)).unwrap().2 = OrderLog::new();
        assert_eq!(b.order(2, &order), Err(OrderingReject::NoPending));
    }

    #[test]
    fn timeout_after_finalize_does_nothing() {
        let mut b = Bench::new(4, 1);
        let id = b.order_batch(1, &[1, 2]);
        let (outcome, fx) = b.timeout(id);
        assert!(!outcome.aborted && outcome.retried_as.is_none());
        assert!(fx.out.is_empty());
    }

    #[test]
    fn timeouts_double_per_attempt_up_to_the_limit() {
        let p = TimeoutPolicy::default();
        let base = p.for_rtt(Some(millis(10) as f64));
        assert_eq!(base, millis(40));
        assert_eq!(p.for_attempt(Some(millis(10) as f64), 2), millis(160));
        assert_eq!(p.for_attempt(Some(millis(10) as f64), 30), p.backoff_limit);
        assert_eq!(p.for_attempt(None, 0), p.max);
    }

    #[test]
    fn retries_exhaust_into_parking() {
        let mut b = Bench::new(4, 1);
        b.proposer.config.retry_cap = 2;
        let (mut id, _) = b.propose(1);
        for _ in 0..3 {
            let (outcome, _) = b.timeout(id.unwrap());
            id = outcome.retried_as;
        }
        assert_eq!(id, None);
        assert_eq!(b.proposer.parked().len(), 1);
        assert_eq!(b.proposer.retired().len(), 3);
    }

    #[test]
    fn no_booth_means_the_batch_waits_then_resumes() {
        let mut b = Bench::new(4, 1);
        b.mmu.mark_availability(NodeId(1), Status::Down, 0).unwrap();
        let (id, fx) = b.propose(1);
        assert_eq!(id, None);
        assert!(fx.out.is_empty());
        assert_eq!(b.proposer.inflight(), 1);
        b.mmu.mark_availability(NodeId(1), Status::Up, 0).unwrap();
        let cost = b.cost.clone();
        let mut ctx = Ctx::new(0, NodeId(0), HashAlg::Sha256, &cost, &b.cache);
        assert_eq!(
            b.proposer
                .resume(&mut ctx, &mut b.mmu, &mut b.booths, &identity_key(0)),
            1
        );
    }

    #[test]
    fn out_of_order_finalization_releases_in_id_order() {
        let mut b = Bench::new(4, 1);
        let (_, fx0) = b.propose(1);
        let (_, fx1) = b.propose(2);
        let (p0, p1) = (pre_order_of(&fx0), pre_order_of(&fx1));
        for v in [1, 2] {
            let r = b.pre_order(v, &p1).unwrap().unwrap();
            let (released, _) = b.reply(v, r).unwrap();
            assert!(released.is_empty(), "id 1 waits behind id 0");
        }
        let mut all = Vec::new();
        for v in [1, 2] {
            let r = b.pre_order(v, &p0).unwrap().unwrap();
            all.extend(b.reply(v, r).unwrap().0);
        }
        let ids: Vec<u64> = all.iter().map(|r| r.entry.ordering_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn message_count_per_instance_is_three_per_validator() {
        let mut b = Bench::new(7, 2);
        let (_, fx) = b.propose(1);
        let pre = pre_order_of(&fx);
        let mut sent = fx.out.iter().map(|o| o.to.len()).sum::<usize>();
        for v in 1..7 {
            let r = b.pre_order(v, &pre).unwrap().unwrap();
            sent += 1;
            let (_, fx) = b.reply(v, r).unwrap();
            sent += fx.out.iter().map(|o| o.to.len()).sum::<usize>();
        }
        assert_eq!(sent, 3 * 6);
    }
}
