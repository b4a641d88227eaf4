//! Shuttled consensus: every `Δ` the proposer commits the entries its log
//! gained during the previous window.
//!
//! Validators that belonged to the ordering booth of every entry in the
//! window rebuild the transaction from their own log and only need id
//! bounds. Everyone else receives the whole transaction with the reply
//! sets that prove each entry was ordered, verifies those individually,
//! and adopts the entries.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booth::{Booth, BoothBook, Directory, Quorum};
use crate::crypto::{aggregate, AggregateError, Digest, IdentityKey, NodeId, PartialSignature};
use crate::engine::{Ctx, Timer};
use crate::ledger::{
    commit_digest, quorum_fits, replies_verify, CommitRecord, Ledger, LedgerError, OrderLog,
    QuorumFault, Transaction,
};
use crate::mmu::{BoothKind, Dealer, Mmu};
use crate::ordering::{slower, smooth, TimeoutPolicy};
use crate::time::SimTime;
use crate::wire::{Commit, Envelope, Message, PcReply, PreCommit, PreCommitSeen, PreCommitUnseen};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    pub timeout: TimeoutPolicy,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            timeout: TimeoutPolicy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum ConsensusReject {
    #[error("message not sent by this instance's proposer")]
    NotFromProposer,
    #[error("booth malformed or not matching the instance")]
    BadBooth,
    #[error("receiver is not a booth member")]
    NotMember,
    #[error("window start not on the window grid")]
    MisalignedWindow,
    #[error("transaction hash does not recompute")]
    HashMismatch,
    #[error("proposer signature invalid")]
    BadSig,
    #[error("window already endorsed for a different transaction")]
    ReusedWindow,
    #[error("an entry lacks 2f valid replies plus the proposer signature")]
    InsufficientReplies,
    #[error("an entry references a booth nobody supplied")]
    UnknownBooth,
    #[error("no such consensus instance")]
    UnknownWindow,
    #[error("reply for an earlier attempt")]
    StaleInstance,
    #[error("reply signer is not a booth validator")]
    ForeignSigner,
    #[error("reply signature or share invalid")]
    InvalidReplySig,
    #[error("commit without a matching pre-commit")]
    NoPending,
    #[error("certificate does not verify")]
    BadCert,
    #[error("quorum does not match the certificate signers")]
    QuorumMismatch,
    #[error("quorum names a node outside the booth")]
    ForeignQuorumMember,
    #[error("quorum lacks the pivot")]
    PivotMissing,
    #[error("log already holds a different batch for an adopted id")]
    DuplicateOrderingId,
    #[error("ledger already holds a different transaction for this window")]
    ConflictingWindow,
}

impl ConsensusReject {
    pub fn name(self) -> &'static str {
        match self {
            Self::NotFromProposer => "NotFromProposer",
            Self::BadBooth => "BadBooth",
            Self::NotMember => "NotMember",
            Self::MisalignedWindow => "MisalignedWindow",
            Self::HashMismatch => "HashMismatch",
            Self::BadSig => "BadSig",
            Self::ReusedWindow => "ReusedWindow",
            Self::InsufficientReplies => "InsufficientReplies",
            Self::UnknownBooth => "UnknownBooth",
            Self::UnknownWindow => "UnknownWindow",
            Self::StaleInstance => "StaleInstance",
            Self::ForeignSigner => "ForeignSigner",
            Self::InvalidReplySig => "InvalidReplySig",
            Self::NoPending => "NoPending",
            Self::BadCert => "BadCert",
            Self::QuorumMismatch => "QuorumMismatch",
            Self::ForeignQuorumMember => "ForeignQuorumMember",
            Self::PivotMissing => "PivotMissing",
            Self::DuplicateOrderingId => "DuplicateOrderingId",
            Self::ConflictingWindow => "ConflictingWindow",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConsensusInstance {
    pub ts: SimTime,
    pub tx: Arc<Transaction>,
    /// Booth of the current attempt; `None` while waiting for one.
    pub booth: Option<Arc<Booth>>,
    pub digest: Digest,
    pub replies: Vec<PartialSignature>,
    pub excluded: BTreeSet<NodeId>,
    pub attempt: u32,
    pub started_at: SimTime,
    pub attempt_started_at: SimTime,
}

/// A window closed on the proposer, in ts order.
#[derive(Clone, Debug)]
pub enum Finalized {
    Committed {
        tx: Arc<Transaction>,
        commit: CommitRecord,
        message: Commit,
        attempts: u32,
    },
    Covered {
        ts: SimTime,
    },
}

impl Finalized {
    pub fn ts(&self) -> SimTime {
        match self {
            Finalized::Committed { commit, .. } => commit.ts,
            Finalized::Covered { ts } => *ts,
        }
    }
}

/// Proposer side of consensus for one instance.
#[derive(Debug)]
pub struct ConsensusProposer {
    instance: u32,
    window_len: SimTime,
    config: ConsensusConfig,
    open: BTreeMap<SimTime, ConsensusInstance>,
    done: BTreeMap<SimTime, Finalized>,
    release_next: SimTime,
    started: BTreeSet<SimTime>,
    /// Smoothed attempt-to-quorum time, which includes validator queueing.
    observed_rtt: Option<f64>,
}

impl ConsensusProposer {
    pub fn new(instance: u32, window_len: SimTime, config: ConsensusConfig) -> Self {
        assert!(window_len > 0);
        Self {
            instance,
            window_len,
            config,
            open: BTreeMap::new(),
            done: BTreeMap::new(),
            release_next: 0,
            started: BTreeSet::new(),
            observed_rtt: None,
        }
    }

    pub fn window_len(&self) -> SimTime {
        self.window_len
    }

    pub fn open_windows(&self) -> usize {
        self.open.len()
    }

    pub fn instance(&self, ts: SimTime) -> Option<&ConsensusInstance> {
        self.open.get(&ts)
    }

    /// Windows closed on the ledger so far: `[0, released_until)`.
    pub fn released_until(&self) -> SimTime {
        self.release_next
    }

    /// Closes window `[w·Δ, (w+1)·Δ)`. The transaction is fixed here, once.
    #[allow(clippy::too_many_arguments)]
    pub fn on_tick(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
        log: &OrderLog,
        ledger: &mut Ledger,
        window: u64,
    ) -> Vec<Finalized> {
        let ts = window * self.window_len;
        if !self.started.insert(ts) {
            return Vec::new();
        }
        let tx = log.window_slice(ts, self.window_len, ctx.alg);
        ctx.charge_hash(tx.entries.len() * 40 + tx.links.len() * 64);
        if tx.is_empty() {
            self.done.insert(ts, Finalized::Covered { ts });
            return self.release(booths, ledger);
        }
        self.open.insert(
            ts,
            ConsensusInstance {
                ts,
                tx: Arc::new(tx),
                booth: None,
                digest: Digest::ZERO,
                replies: Vec::new(),
                excluded: BTreeSet::new(),
                attempt: 0,
                started_at: ctx.now,
                attempt_started_at: ctx.now,
            },
        );
        self.start_attempt(ctx, mmu, booths, key, ts);
        Vec::new()
    }

    fn start_attempt(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
        ts: SimTime,
    ) {
        let inst = self.open.get_mut(&ts).expect("caller opened it");
        inst.replies.clear();
        inst.excluded.clear();
        inst.attempt_started_at = ctx.now;
        let Some(booth) = mmu.current_booth(BoothKind::Consensus) else {
            inst.booth = None;
            ctx.set_timer(
                self.config.timeout.min,
                Timer::ConsensusTimeout {
                    instance: self.instance,
                    ts,
                    attempt: inst.attempt,
                },
            );
            return;
        };
        let booth = booths.insert(booth);
        let tx = inst.tx.clone();
        let digest = commit_digest(ctx.alg, ts, &tx.tx_hash, &booth.booth_hash);
        let proposer_sig = ctx.sign(key, &digest);
        inst.booth = Some(booth.clone());
        inst.digest = digest;

        let ordering_booths: Vec<Arc<Booth>> = tx
            .booth_refs()
            .iter()
            .map(|h| {
                booths
                    .get(h)
                    .expect("proposer knows every booth it ordered in")
                    .clone()
            })
            .collect();
        let (seen, unseen): (Vec<NodeId>, Vec<NodeId>) = booth
            .validators()
            .partition(|v| inst.attempt == 0 && ordering_booths.iter().all(|b| b.contains(*v)));
        if !seen.is_empty() {
            ctx.send(
                seen,
                Envelope::new(
                    self.instance,
                    Message::PreCommit(PreCommit::Seen(PreCommitSeen {
                        ts,
                        tx_hash: tx.tx_hash,
                        first_id: tx.first_id().expect("non-empty"),
                        last_id: tx.last_id().expect("non-empty"),
                        booth: booth.clone(),
                        booth_hash: booth.booth_hash,
                        proposer_sig,
                    })),
                ),
            );
        }
        let mut drain = ctx.egress_backlog;
        if !unseen.is_empty() {
            let per_entry = 96 + 150 * (booth.quorum_size() + 1);
            let bytes = tx
                .entries
                .iter()
                .map(|e| e.batch.payload_bytes() + per_entry)
                .sum::<usize>();
            // Receivers decode in parallel, so one decode is added.
            drain += ctx.cost.wire(bytes) * unseen.len() as SimTime + ctx.cost.codec(bytes);
            ctx.send(
                unseen,
                Envelope::new(
                    self.instance,
                    Message::PreCommit(PreCommit::Unseen(PreCommitUnseen {
                        ts,
                        tx_hash: tx.tx_hash,
                        tx,
                        ordering_booths,
                        booth: booth.clone(),
                        booth_hash: booth.booth_hash,
                        proposer_sig,
                    })),
                ),
            );
        }
        let rtt = slower(mmu.booth_rtt(&booth), self.observed_rtt);
        let after = ctx.charged() + drain + self.config.timeout.for_attempt(rtt, inst.attempt);
        ctx.set_timer(
            after,
            Timer::ConsensusTimeout {
                instance: self.instance,
                ts,
                attempt: inst.attempt,
            },
        );
    }

    pub fn on_reply(
        &mut self,
        ctx: &mut Ctx,
        booths: &BoothBook,
        ledger: &mut Ledger,
        from: NodeId,
        reply: PcReply,
    ) -> Result<Vec<Finalized>, ConsensusReject> {
        let ts = reply.ts;
        let Some(inst) = self.open.get_mut(&ts) else {
            return if self.done.contains_key(&ts)
                || (ts < self.release_next && self.started.contains(&ts))
            {
                Ok(Vec::new())
            } else {
                Err(ConsensusReject::UnknownWindow)
            };
        };
        let Some(booth) = inst.booth.clone() else {
            return Err(ConsensusReject::StaleInstance);
        };
        let p = reply.partial;
        if p.payload_digest != inst.digest {
            return Err(ConsensusReject::StaleInstance);
        }
        if p.signer != from || p.signer == booth.proposer || !booth.contains(p.signer) {
            return Err(ConsensusReject::ForeignSigner);
        }
        if inst.excluded.contains(&p.signer) || inst.replies.iter().any(|r| r.signer == p.signer) {
            return Ok(Vec::new());
        }
        if p.share.is_none() {
            return Err(ConsensusReject::InvalidReplySig);
        }
        let signer_key = booth
            .member(p.signer)
            .expect("membership checked")
            .verify_key;
        if !ctx.verify(&signer_key, &inst.digest, &p.sig_bytes) {
            return Err(ConsensusReject::InvalidReplySig);
        }
        inst.replies.push(p);

        let need = booth.quorum_size();
        loop {
            let inst = self.open.get_mut(&ts).expect("present");
            let Some(pivot_reply) = inst.replies.iter().find(|r| r.signer == booth.pivot) else {
                return Ok(Vec::new());
            };
            if inst.replies.len() < need {
                return Ok(Vec::new());
            }
            let mut chosen = vec![pivot_reply.clone()];
            chosen.extend(
                inst.replies
                    .iter()
                    .filter(|r| r.signer != booth.pivot)
                    .take(need - 1)
                    .cloned(),
            );
            ctx.charge(
                ctx.cost.share_combine_ns * chosen.len() as SimTime + ctx.cost.aggregate_verify_ns,
            );
            match aggregate(&chosen, &booth.verify_key) {
                Ok(cert) => {
                    let inst = self.open.remove(&ts).expect("present");
                    let sample = ctx.now.saturating_sub(inst.attempt_started_at) as f64;
                    self.observed_rtt = Some(smooth(self.observed_rtt, sample));
                    let quorum: Quorum = chosen.iter().map(|r| r.signer).collect();
                    let message = Commit {
                        ts,
                        quorum: quorum.clone(),
                        booth_hash: booth.booth_hash,
                        cert,
                        tx_hash: inst.tx.tx_hash,
                    };
                    ctx.send(
                        booth.validators().collect(),
                        Envelope::new(self.instance, Message::Commit(message.clone())),
                    );
                    let commit = CommitRecord {
                        ts,
                        quorum,
                        booth_ref: booth.booth_hash,
                        cert,
                        tx_hash: inst.tx.tx_hash,
                    };
                    self.done.insert(
                        ts,
                        Finalized::Committed {
                            tx: inst.tx,
                            commit,
                            message,
                            attempts: inst.attempt + 1,
                        },
                    );
                    return Ok(self.release(booths, ledger));
                }
                Err(AggregateError::InvalidShare(bad)) => {
                    ctx.charge(ctx.cost.aggregate_verify_ns * chosen.len() as SimTime);
                    inst.replies.retain(|r| r.signer != bad);
                    inst.excluded.insert(bad);
                }
                Err(_) => return Err(ConsensusReject::InvalidReplySig),
            }
        }
    }

    /// Re-runs a stalled window under the current booth, sending the full
    /// transaction to every validator. The window keeps its ts.
    pub fn on_timeout(
        &mut self,
        ctx: &mut Ctx,
        mmu: &mut Mmu,
        booths: &mut BoothBook,
        key: &IdentityKey,
        ts: SimTime,
        attempt: u32,
    ) -> bool {
        match self.open.get_mut(&ts) {
            Some(inst) if inst.attempt == attempt => {
                inst.attempt += 1;
            }
            _ => return false,
        }
        self.start_attempt(ctx, mmu, booths, key, ts);
        true
    }

    fn release(&mut self, booths: &BoothBook, ledger: &mut Ledger) -> Vec<Finalized> {
        let mut out = Vec::new();
        while let Some(fin) = self.done.remove(&self.release_next) {
            match &fin {
                Finalized::Committed { tx, commit, .. } => {
                    let mut refs = tx.booth_refs();
                    refs.insert(commit.booth_ref);
                    let used = refs.iter().filter_map(|h| booths.get(h).cloned());
                    ledger
                        .record_committed(tx.clone(), commit.clone(), used)
                        .expect("proposer commits each window once");
                }
                Finalized::Covered { ts } => {
                    ledger
                        .record_covered(*ts)
                        .expect("proposer covers each window once");
                }
            }
            out.push(fin);
            self.release_next += self.window_len;
        }
        out
    }
}

#[derive(Clone, Debug)]
struct PendingCommit {
    tx: Arc<Transaction>,
    booth: Arc<Booth>,
    ordering_booths: Vec<Arc<Booth>>,
    digest: Digest,
    reply: PartialSignature,
}

/// Validator side of consensus for one instance.
#[derive(Debug)]
pub struct ConsensusValidator {
    instance: u32,
    proposer: NodeId,
    pivot: NodeId,
    f: usize,
    window_len: SimTime,
    /// The transaction hash endorsed for each window, across all booths.
    used: BTreeMap<SimTime, Digest>,
    pending: BTreeMap<(SimTime, Digest), PendingCommit>,
    /// SEEN pre-commits whose window this node has not fully ordered yet,
    /// usually because the last Order is still in flight.
    deferred: BTreeMap<SimTime, PreCommitSeen>,
    /// Commits that overtook a deferred pre-commit for their window.
    early: BTreeMap<SimTime, Commit>,
}

/// Which pre-commit path a validator took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreCommitPath {
    Seen,
    Unseen {
        adopted: usize,
    },
    Repeat,
    /// Local entries do not hash to the proposal yet; held until an Order
    /// inside the announced id range arrives.
    Deferred,
}

impl ConsensusValidator {
    pub fn new(
        instance: u32,
        proposer: NodeId,
        pivot: NodeId,
        f: usize,
        window_len: SimTime,
    ) -> Self {
        Self {
            instance,
            proposer,
            pivot,
            f,
            window_len,
            used: BTreeMap::new(),
            pending: BTreeMap::new(),
            deferred: BTreeMap::new(),
            early: BTreeMap::new(),
        }
    }

    pub fn deferred(&self) -> usize {
        self.deferred.len()
    }

    /// A commit for `ts` that arrived while its pre-commit was deferred.
    pub fn take_early_commit(&mut self, ts: SimTime) -> Option<Commit> {
        self.early.remove(&ts)
    }

    /// Re-examines deferred SEEN pre-commits whose id range covers a newly
    /// ordered `id`.
    #[allow(clippy::too_many_arguments)]
    pub fn on_ordered(
        &mut self,
        ctx: &mut Ctx,
        key: &IdentityKey,
        dealer: &Dealer,
        directory: &Directory,
        booths: &mut BoothBook,
        log: &mut OrderLog,
        id: u64,
    ) -> Vec<(SimTime, Result<PreCommitPath, ConsensusReject>)> {
        let due: Vec<SimTime> = self
            .deferred
            .iter()
            .filter(|(_, m)| m.first_id <= id && id <= m.last_id)
            .map(|(ts, _)| *ts)
            .collect();
        due.into_iter()
            .map(|ts| {
                let m = self.deferred.remove(&ts).expect("collected above");
                let proposer = self.proposer;
                (
                    ts,
                    self.on_pre_commit(
                        ctx,
                        key,
                        dealer,
                        directory,
                        booths,
                        log,
                        proposer,
                        PreCommit::Seen(m),
                    ),
                )
            })
            .collect()
    }

    pub fn endorsed(&self, ts: SimTime) -> Option<&Digest> {
        self.used.get(&ts)
    }

    fn check_booth(
        &self,
        ctx: &mut Ctx,
        directory: &Directory,
        booths: &mut BoothBook,
        booth: &Arc<Booth>,
    ) -> Result<Arc<Booth>, ConsensusReject> {
        if booth.proposer != self.proposer || booth.pivot != self.pivot {
            return Err(ConsensusReject::BadBooth);
        }
        if let Some(known) = booths.get(&booth.booth_hash) {
            return Ok(known.clone());
        }
        ctx.charge_hash(256 * booth.size());
        if !booth.well_formed(self.f, directory) {
            return Err(ConsensusReject::BadBooth);
        }
        Ok(booths.insert(booth.clone()))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_pre_commit(
        &mut self,
        ctx: &mut Ctx,
        key: &IdentityKey,
        dealer: &Dealer,
        directory: &Directory,
        booths: &mut BoothBook,
        log: &mut OrderLog,
        from: NodeId,
        msg: PreCommit,
    ) -> Result<PreCommitPath, ConsensusReject> {
        if from != self.proposer {
            return Err(ConsensusReject::NotFromProposer);
        }
        let (ts, tx_hash, claimed_booth, booth_hash, proposer_sig) = match &msg {
            PreCommit::Seen(m) => (m.ts, m.tx_hash, &m.booth, m.booth_hash, m.proposer_sig),
            PreCommit::Unseen(m) => (m.ts, m.tx_hash, &m.booth, m.booth_hash, m.proposer_sig),
        };
        if ts % self.window_len != 0 {
            return Err(ConsensusReject::MisalignedWindow);
        }
        if !claimed_booth.contains(ctx.me) {
            return Err(ConsensusReject::NotMember);
        }
        if booth_hash != claimed_booth.booth_hash {
            return Err(ConsensusReject::HashMismatch);
        }
        let booth = self.check_booth(ctx, directory, booths, claimed_booth)?;
        let digest = commit_digest(ctx.alg, ts, &tx_hash, &booth.booth_hash);
        if !ctx.verify(
            &booth.member(self.proposer).expect("well-formed").verify_key,
            &digest,
            &proposer_sig,
        ) {
            return Err(ConsensusReject::BadSig);
        }
        match self.used.get(&ts) {
            Some(h) if *h != tx_hash => return Err(ConsensusReject::ReusedWindow),
            _ => {}
        }
        if let Some(p) = self.pending.get(&(ts, booth.booth_hash)) {
            // A retry in the same booth: the earlier reply may have been lost.
            let reply = p.reply.clone();
            self.send_reply(ctx, ts, reply);
            return Ok(PreCommitPath::Repeat);
        }

        // Any newer proposal for this window supersedes a held one.
        self.deferred.remove(&ts);
        let (tx, ordering_booths, path) = match msg {
            PreCommit::Seen(m) => {
                let entries = log.range(m.first_id, m.last_id);
                let tx = Transaction::new(ts, self.window_len, entries, ctx.alg);
                ctx.charge_hash(tx.entries.len() * 40 + tx.links.len() * 64);
                if tx.tx_hash != tx_hash {
                    if self.used.contains_key(&ts) {
                        return Err(ConsensusReject::HashMismatch);
                    }
                    self.deferred.insert(ts, m);
                    return Ok(PreCommitPath::Deferred);
                }
                let ordering_booths = tx
                    .booth_refs()
                    .iter()
                    .map(|h| booths.get(h).cloned().ok_or(ConsensusReject::UnknownBooth))
                    .collect::<Result<Vec<_>, _>>()?;
                (Arc::new(tx), ordering_booths, PreCommitPath::Seen)
            }
            PreCommit::Unseen(m) => {
                let (ordering_booths, adopted) =
                    self.verify_unseen(ctx, directory, booths, log, &m)?;
                (m.tx, ordering_booths, PreCommitPath::Unseen { adopted })
            }
        };

        self.used.insert(ts, tx_hash);
        let share = dealer.share_for(ctx.me, &booth.verify_key);
        let reply = ctx.endorse(key, share.as_ref(), &digest);
        self.send_reply(ctx, ts, reply.clone());
        self.pending.insert(
            (ts, booth.booth_hash),
            PendingCommit {
                tx,
                booth,
                ordering_booths,
                digest,
                reply,
            },
        );
        Ok(path)
    }

    fn send_reply(&self, ctx: &mut Ctx, ts: SimTime, partial: PartialSignature) {
        ctx.send(
            vec![self.proposer],
            Envelope::new(self.instance, Message::PcReply(PcReply { ts, partial })),
        );
    }

    /// Outsider verification of a piggybacked transaction, then adoption of
    /// its entries into the local log.
    fn verify_unseen(
        &self,
        ctx: &mut Ctx,
        directory: &Directory,
        booths: &mut BoothBook,
        log: &mut OrderLog,
        m: &PreCommitUnseen,
    ) -> Result<(Vec<Arc<Booth>>, usize), ConsensusReject> {
        let tx = &m.tx;
        ctx.charge_hash(tx.entries.len() * 40 + tx.links.len() * 64);
        if tx.window_start != m.ts
            || tx.window_len != self.window_len
            || tx.tx_hash != m.tx_hash
            || !tx.hash_matches(ctx.alg)
        {
            return Err(ConsensusReject::HashMismatch);
        }
        let mut supplied = BTreeMap::new();
        for b in &m.ordering_booths {
            let b = self.check_booth(ctx, directory, booths, b)?;
            supplied.insert(b.booth_hash, b);
        }
        let cache = ctx.cache;
        for e in &tx.entries {
            let booth = supplied
                .get(&e.booth_ref)
                .ok_or(ConsensusReject::UnknownBooth)?;
            ctx.charge_hash(e.batch.payload_bytes());
            if !e.batch.hash_matches(ctx.alg) {
                return Err(ConsensusReject::HashMismatch);
            }
            if quorum_fits(booth, &e.quorum).is_err() {
                return Err(ConsensusReject::InsufficientReplies);
            }
            ctx.charge(ctx.cost.verify_ns * (e.replies.len() as SimTime + 1));
            if !replies_verify(e, booth, &e.signed_digest(ctx.alg), cache) {
                return Err(ConsensusReject::InsufficientReplies);
            }
        }
        let mut adopted = 0;
        for e in &tx.entries {
            match log.append_ordered(e.clone(), ctx.now) {
                Ok(true) => adopted += 1,
                Ok(false) => {}
                Err(_) => return Err(ConsensusReject::DuplicateOrderingId),
            }
        }
        Ok((supplied.into_values().collect(), adopted))
    }

    /// Verifies a commit certificate and records the window. Returns the
    /// committed transaction if the ledger grew.
    pub fn on_commit(
        &mut self,
        ctx: &mut Ctx,
        ledger: &mut Ledger,
        from: NodeId,
        msg: Commit,
    ) -> Result<Option<(Arc<Transaction>, CommitRecord)>, ConsensusReject> {
        if from != self.proposer {
            return Err(ConsensusReject::NotFromProposer);
        }
        let Some(p) = self.pending.get(&(msg.ts, msg.booth_hash)) else {
            return match ledger.get(msg.ts).and_then(|r| r.tx_hash()) {
                Some(h) if h == msg.tx_hash => Ok(None),
                _ if self.deferred.contains_key(&msg.ts) => {
                    self.early.insert(msg.ts, msg);
                    Ok(None)
                }
                _ => Err(ConsensusReject::NoPending),
            };
        };
        if p.tx.tx_hash != msg.tx_hash {
            return Err(ConsensusReject::HashMismatch);
        }
        match quorum_fits(&p.booth, &msg.quorum) {
            Ok(()) => {}
            Err(QuorumFault::Foreign) => return Err(ConsensusReject::ForeignQuorumMember),
            Err(QuorumFault::PivotMissing) => return Err(ConsensusReject::PivotMissing),
            Err(QuorumFault::TooSmall) => return Err(ConsensusReject::QuorumMismatch),
        }
        if msg.cert.signer_set_digest != p.booth.verify_key.signer_set_digest(&msg.quorum) {
            return Err(ConsensusReject::QuorumMismatch);
        }
        if !ctx.verify_aggregate(&msg.cert, &p.digest, &p.booth.verify_key, &msg.quorum) {
            return Err(ConsensusReject::BadCert);
        }
        let p = self
            .pending
            .remove(&(msg.ts, msg.booth_hash))
            .expect("looked up above");
        self.pending.retain(|(ts, _), _| *ts != msg.ts);
        self.deferred.remove(&msg.ts);
        self.early.remove(&msg.ts);
        let record = CommitRecord {
            ts: msg.ts,
            quorum: msg.quorum,
            booth_ref: msg.booth_hash,
            cert: msg.cert,
            tx_hash: msg.tx_hash,
        };
        let booths = p
            .ordering_booths
            .into_iter()
            .chain(std::iter::once(p.booth));
        match ledger.record_committed(p.tx.clone(), record.clone(), booths) {
            Ok(true) => Ok(Some((p.tx, record))),
            Ok(false) => Ok(None),
            Err(LedgerError::ConflictingWindow { .. }) => Err(ConsensusReject::ConflictingWindow),
            Err(LedgerError::DuplicateOrderingId { .. }) => {
                unreachable!("ledger records never touch the log")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::booth::fixtures::identity_key;
    use crate::crypto::HashAlg;
    use crate::engine::Effects;
    use crate::mmu::Status;
    use crate::ordering::tests::Bench;

    const DELTA: SimTime = 100;

    struct World {
        ord: Bench,
        proposer: ConsensusProposer,
        ledger: Ledger,
        validators: BTreeMap<NodeId, (ConsensusValidator, Ledger)>,
    }

    impl World {
        fn new(n: u32, f: usize) -> Self {
            let ord = Bench::new(n, f);
            let validators = (1..n)
                .map(|i| {
                    (
                        NodeId(i),
                        (
                            ConsensusValidator::new(0, NodeId(0), NodeId(1), f, DELTA),
                            Ledger::new(DELTA),
                        ),
                    )
                })
                .collect();
            Self {
                ord,
                proposer: ConsensusProposer::new(0, DELTA, ConsensusConfig::default()),
                ledger: Ledger::new(DELTA),
                validators,
            }
        }

        fn tick(&mut self, window: u64) -> (Vec<Finalized>, Effects) {
            let b = &mut self.ord;
            let cost = b.cost.clone();
            let mut ctx = Ctx::new(b.now, NodeId(0), HashAlg::Sha256, &cost, &b.cache);
            let fin = self.proposer.on_tick(
                &mut ctx,
                &mut b.mmu,
                &mut b.booths,
                &identity_key(0),
                &b.log,
                &mut self.ledger,
                window,
            );
            (fin, ctx.into_effects())
        }

        fn pre_commit(
            &mut self,
            v: u32,
            msg: PreCommit,
        ) -> Result<(PreCommitPath, PcReply), ConsensusReject> {
            let (path, reply) = self.pre_commit_raw(v, msg)?;
            Ok((path, reply.expect("validator replied")))
        }

        fn pre_commit_raw(
            &mut self,
            v: u32,
            msg: PreCommit,
        ) -> Result<(PreCommitPath, Option<PcReply>), ConsensusReject> {
            let b = &mut self.ord;
            let cost = b.cost.clone();
            let mut ctx = Ctx::new(b.now, NodeId(v), HashAlg::Sha256, &cost, &b.cache);
            let (_, book, log) = b.validators.get_mut(&NodeId(v)).unwrap();
            let (val, _) = self.validators.get_mut(&NodeId(v)).unwrap();
            let path = val.on_pre_commit(
                &mut ctx,
                &identity_key(v),
                &b.dealer,
                &b.directory,
                book,
                log,
                NodeId(0),
                msg,
            )?;
            let reply = ctx
                .into_effects()
                .out
                .into_iter()
                .find_map(|o| match o.envelope.msg {
                    Message::PcReply(r) => Some(r),
                    _ => None,
                });
            Ok((path, reply))
        }

        fn reply(
            &mut self,
            from: u32,
            r: PcReply,
        ) -> Result<(Vec<Finalized>, Effects), ConsensusReject> {
            let b = &mut self.ord;
            let cost = b.cost.clone();
            let mut ctx = Ctx::new(b.now, NodeId(0), HashAlg::Sha256, &cost, &b.cache);
            let fin =
                self.proposer
                    .on_reply(&mut ctx, &b.booths, &mut self.ledger, NodeId(from), r)?;
            Ok((fin, ctx.into_effects()))
        }

        fn commit(&mut self, v: u32, msg: Commit) -> Result<bool, ConsensusReject> {
            let b = &mut self.ord;
            let cost = b.cost.clone();
            let mut ctx = Ctx::new(b.now, NodeId(v), HashAlg::Sha256, &cost, &b.cache);
            let (val, ledger) = self.validators.get_mut(&NodeId(v)).unwrap();
            val.on_commit(&mut ctx, ledger, NodeId(0), msg)
                .map(|r| r.is_some())
        }

        fn timeout(&mut self, ts: SimTime, attempt: u32) -> Effects {
            let b = &mut self.ord;
            let cost = b.cost.clone();
            let mut ctx = Ctx::new(b.now, NodeId(0), HashAlg::Sha256, &cost, &b.cache);
            self.proposer.on_timeout(
                &mut ctx,
                &mut b.mmu,
                &mut b.booths,
                &identity_key(0),
                ts,
                attempt,
            );
            ctx.into_effects()
        }
    }

    fn pre_commits(fx: &Effects) -> Vec<(Vec<NodeId>, PreCommit)> {
        fx.out
            .iter()
            .filter_map(|o| match &o.envelope.msg {
                Message::PreCommit(m) => Some((o.to.clone(), m.clone())),
                _ => None,
            })
            .collect()
    }

    fn for_node(fx: &Effects, v: u32) -> PreCommit {
        pre_commits(fx)
            .into_iter()
            .find(|(to, _)| to.contains(&NodeId(v)))
            .map(|(_, m)| m)
            .unwrap()
    }

    fn commit_of(fx: &Effects) -> Commit {
        fx.out
            .iter()
            .find_map(|o| match &o.envelope.msg {
                Message::Commit(m) => Some(m.clone()),
                _ => None,
            })
            .unwrap()
    }

    /// Orders two batches in window 0 with all validators responding.
    fn ordered_window(w: &mut World) {
        w.ord.now = 10;
        w.ord.order_batch(1, &[1, 2, 3]);
        w.ord.now = 40;
        w.ord.order_batch(2, &[1, 2, 3]);
        w.ord.now = DELTA;
    }

    fn run_round(
        w: &mut World,
        fx: &Effects,
        responders: &[u32],
    ) -> (Vec<Finalized>, Option<Commit>) {
        let mut fin = Vec::new();
        let mut commit = None;
        for &v in responders {
            let (_, r) = w.pre_commit(v, for_node(fx, v)).unwrap();
            let (f, fx) = w.reply(v, r).unwrap();
            fin.extend(f);
            if commit.is_none() && !fin.is_empty() {
                commit = Some(commit_of(&fx));
            }
        }
        (fin, commit)
    }

    #[test]
    fn ticks_tile_and_empty_windows_are_covered_without_messages() {
        let mut w = World::new(4, 1);
        for window in 0..3 {
            let (fin, fx) = w.tick(window);
            assert_eq!(fin.len(), 1);
            assert!(matches!(fin[0], Finalized::Covered { .. }));
            assert!(fx.out.is_empty());
        }
        assert_eq!(w.ledger.tiled_until(), 300);
        assert!(w.ledger.verify_chain(&w.ord.cache).is_ok());
    }

    #[test]
    fn same_booth_validators_all_get_seen() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        let (_, fx) = w.tick(0);
        let pcs = pre_commits(&fx);
        assert_eq!(pcs.len(), 1);
        assert!(matches!(pcs[0].1, PreCommit::Seen(_)));
        assert_eq!(pcs[0].0.len(), 3);
    }

    #[test]
    fn honest_round_commits_identically_everywhere() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        let (_, fx) = w.tick(0);
        let (fin, commit) = run_round(&mut w, &fx, &[2, 1, 3]);
        assert_eq!(fin.len(), 1);
        let commit = commit.unwrap();
        assert_eq!(commit.quorum, [NodeId(1), NodeId(2)].into_iter().collect());
        for v in 1..4 {
            assert!(w.commit(v, commit.clone()).unwrap());
            assert!(
                !w.commit(v, commit.clone()).unwrap(),
                "duplicate commit is idempotent"
            );
        }
        let expected = w.ledger.tx_hashes();
        for (_, (_, ledger)) in &w.validators {
            assert_eq!(ledger.tx_hashes(), expected);
            ledger.verify_records(&w.ord.cache).unwrap();
        }
        w.ledger.verify_chain(&w.ord.cache).unwrap();
    }

    #[test]
    fn pivot_is_required_in_the_commit_quorum() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        let (_, fx) = w.tick(0);
        for v in [2, 3] {
            let (_, r) = w.pre_commit(v, for_node(&fx, v)).unwrap();
            let (fin, _) = w.reply(v, r).unwrap();
            assert!(fin.is_empty());
        }
        let (_, r) = w.pre_commit(1, for_node(&fx, 1)).unwrap();
        assert_eq!(w.reply(1, r).unwrap().0.len(), 1);
    }

    #[test]
    fn fresh_member_gets_unseen_and_adopts_entries() {
        let mut w = World::new(5, 1);
        // Order window 0 in booth {0,1,2,3}; node 4 never sees it.
        w.ord
            .mmu
            .mark_availability(NodeId(4), Status::Down, 0)
            .unwrap();
        w.ord.validators.insert(
            NodeId(4),
            (
                crate::ordering::OrderingValidator::new(0, NodeId(0), NodeId(1), 1),
                BoothBook::default(),
                OrderLog::new(),
            ),
        );
        w.validators.insert(
            NodeId(4),
            (
                ConsensusValidator::new(0, NodeId(0), NodeId(1), 1, DELTA),
                Ledger::new(DELTA),
            ),
        );
        ordered_window(&mut w);
        // Swap node 3 for node 4 before the window closes.
        w.ord
            .mmu
            .mark_availability(NodeId(4), Status::Up, DELTA)
            .unwrap();
        w.ord
            .mmu
            .mark_availability(NodeId(3), Status::Down, DELTA)
            .unwrap();
        let (_, fx) = w.tick(0);
        let pcs = pre_commits(&fx);
        assert_eq!(pcs.len(), 2);
        assert!(
            matches!(pcs[0].1, PreCommit::Seen(_)),
            "seen goes out first"
        );
        assert_eq!(pcs[1].0, vec![NodeId(4)]);
        let (path, r) = w.pre_commit(4, for_node(&fx, 4)).unwrap();
        assert_eq!(path, PreCommitPath::Unseen { adopted: 2 });
        assert!(w.reply(4, r).unwrap().0.is_empty());
        let (_, r) = w.pre_commit(1, for_node(&fx, 1)).unwrap();
        let (fin, fx) = w.reply(1, r).unwrap();
        assert_eq!(fin.len(), 1);
        let commit = commit_of(&fx);
        assert!(w.commit(4, commit).unwrap());
        w.validators[&NodeId(4)]
            .1
            .verify_records(&w.ord.cache)
            .unwrap();
    }

    #[test]
    fn member_of_only_some_ordering_booths_gets_unseen() {
        let mut w = World::new(5, 1);
        w.ord
            .mmu
            .mark_availability(NodeId(4), Status::Down, 0)
            .unwrap();
        w.ord.now = 10;
        w.ord.order_batch(1, &[1, 2, 3]);
        // Second entry ordered in {0,1,2,4}.
        w.ord.validators.insert(
            NodeId(4),
            (
                crate::ordering::OrderingValidator::new(0, NodeId(0), NodeId(1), 1),
                BoothBook::default(),
                OrderLog::new(),
            ),
        );
        w.ord
            .mmu
            .mark_availability(NodeId(4), Status::Up, 20)
            .unwrap();
        w.ord
            .mmu
            .mark_availability(NodeId(3), Status::Down, 20)
            .unwrap();
        w.ord.now = 40;
        w.ord.order_batch(2, &[1, 2, 4]);
        w.ord.now = DELTA;
        let (_, fx) = w.tick(0);
        let pcs = pre_commits(&fx);
        // Consensus booth {0,1,2,4}: node 2 saw both, 4 saw only the second.
        let seen: Vec<NodeId> = pcs
            .iter()
            .filter(|(_, m)| matches!(m, PreCommit::Seen(_)))
            .flat_map(|(to, _)| to.clone())
            .collect();
        assert_eq!(seen, vec![NodeId(1), NodeId(2)]);
        assert!(pcs
            .iter()
            .any(|(to, m)| to == &vec![NodeId(4)] && matches!(m, PreCommit::Unseen(_))));
    }

    #[test]
    fn unseen_entry_short_one_reply_is_rejected() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        w.ord.now = DELTA;
        let (_, fx) = w.tick(0);
        // Force the retry path so everyone gets the full transaction.
        let fx2 = w.timeout(0, 0);
        let PreCommit::Unseen(mut m) = for_node(&fx2, 2) else {
            panic!("retries send the full transaction")
        };
        let mut tx = (*m.tx).clone();
        let mut e = (*tx.entries[0]).clone();
        e.replies.pop();
        tx.entries[0] = Arc::new(e);
        m.tx = Arc::new(tx);
        let fresh = ConsensusValidator::new(0, NodeId(0), NodeId(1), 1, DELTA);
        w.validators.get_mut(&NodeId(2)).unwrap().0 = fresh;
        assert_eq!(
            w.pre_commit(2, PreCommit::Unseen(m)).err(),
            Some(ConsensusReject::InsufficientReplies)
        );
        let _ = fx;
    }

    #[test]
    fn second_pre_commit_for_same_window_with_other_tx_is_reused() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        let (_, fx) = w.tick(0);
        let PreCommit::Seen(m) = for_node(&fx, 2) else {
            panic!()
        };
        w.pre_commit(2, PreCommit::Seen(m.clone())).unwrap();
        let mut other = m.clone();
        other.tx_hash = other.tx_hash.with_bit_flipped(0);
        let digest = commit_digest(HashAlg::Sha256, other.ts, &other.tx_hash, &other.booth_hash);
        other.proposer_sig = identity_key(0).sign_raw(&digest);
        assert_eq!(
            w.pre_commit(2, PreCommit::Seen(other)).err(),
            Some(ConsensusReject::ReusedWindow)
        );
    }

    #[test]
    fn seen_validator_missing_an_entry_holds_the_pre_commit() {
        let mut w = World::new(4, 1);
        w.ord.now = 10;
        w.ord.order_batch(1, &[1, 2, 3]);
        w.ord.now = 40;
        w.ord.order_batch(2, &[1, 2]);
        w.ord.now = DELTA;
        let (_, fx) = w.tick(0);
        let (path, reply) = w.pre_commit_raw(3, for_node(&fx, 3)).unwrap();
        assert_eq!(path, PreCommitPath::Deferred);
        assert!(reply.is_none());
        assert_eq!(w.validators[&NodeId(3)].0.deferred(), 1);
    }

    #[test]
    fn forged_commit_quorum_is_rejected() {
        let mut w = World::new(5, 1);
        w.ord
            .mmu
            .mark_availability(NodeId(4), Status::Down, 0)
            .unwrap();
        ordered_window(&mut w);
        let (_, fx) = w.tick(0);
        let (_, commit) = run_round(&mut w, &fx, &[1, 2, 3]);
        let mut forged = commit.unwrap();
        let victim = *forged.quorum.iter().find(|id| **id != NodeId(1)).unwrap();
        forged.quorum.remove(&victim);
        forged.quorum.insert(NodeId(4));
        for v in 1..4 {
            assert_eq!(
                w.commit(v, forged.clone()).err(),
                Some(ConsensusReject::ForeignQuorumMember)
            );
        }
    }

    #[test]
    fn retry_keeps_ts_and_sends_everything_unseen() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        let (_, fx) = w.tick(0);
        let (_, stale) = w.pre_commit(2, for_node(&fx, 2)).unwrap();
        let fx2 = w.timeout(0, 0);
        let pcs = pre_commits(&fx2);
        assert_eq!(pcs.len(), 1);
        assert!(matches!(pcs[0].1, PreCommit::Unseen(_)));
        assert_eq!(pcs[0].1.ts(), 0);
        // Same booth, so the earlier reply is still for the current digest.
        assert!(w.reply(2, stale).is_ok());
        // An outdated attempt number is ignored.
        assert!(w.timeout(0, 0).out.is_empty());
        let (_, r) = w.pre_commit(1, for_node(&fx2, 1)).unwrap();
        assert_eq!(w.reply(1, r).unwrap().0.len(), 1);
    }

    #[test]
    fn later_window_waits_for_earlier_before_reaching_the_ledger() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        let (_, fx0) = w.tick(0);
        w.ord.now = 150;
        w.ord.order_batch(3, &[1, 2, 3]);
        w.ord.now = 2 * DELTA;
        let (_, fx1) = w.tick(1);
        let (fin, _) = run_round(&mut w, &fx1, &[1, 2]);
        assert!(fin.is_empty(), "window 100 is held behind window 0");
        assert_eq!(w.ledger.len(), 0);
        let (fin, _) = run_round(&mut w, &fx0, &[1, 2]);
        assert_eq!(
            fin.iter().map(Finalized::ts).collect::<Vec<_>>(),
            vec![0, 100]
        );
        w.ledger.verify_chain(&w.ord.cache).unwrap();
    }

    #[test]
    fn no_booth_defers_the_attempt() {
        let mut w = World::new(4, 1);
        ordered_window(&mut w);
        w.ord
            .mmu
            .mark_availability(NodeId(1), Status::Down, DELTA)
            .unwrap();
        let (_, fx) = w.tick(0);
        assert!(fx.out.is_empty());
        assert_eq!(fx.timers.len(), 1);
        w.ord
            .mmu
            .mark_availability(NodeId(1), Status::Up, DELTA)
            .unwrap();
        let fx = w.timeout(0, 0);
        assert_eq!(pre_commits(&fx).len(), 1);
    }
}
