//! Total order log, consensus windows and the dual data/membership chains.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booth::{Booth, BoothBook, Quorum};
use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{
    AggregateSignature, Digest, HashAlg, PartialSignature, Signature, VerifyCache,
};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("ordering id {id} already holds batch {existing:?}, refusing {conflicting:?}")]
    DuplicateOrderingId {
        id: u64,
        existing: Digest,
        conflicting: Digest,
    },
    #[error("window {ts} already committed with a different transaction")]
    ConflictingWindow { ts: SimTime },
}

/// Digest signed in the ordering phase: `(i, h_B, h_Vo)`.
pub fn ordering_digest(alg: HashAlg, id: u64, batch_hash: &Digest, booth_hash: &Digest) -> Digest {
    alg.tuple("pre-order")
        .u64(id)
        .digest(batch_hash)
        .digest(booth_hash)
        .finish()
}

/// Digest signed in the consensus phase: `(ts, h_tx, h_Vc)`.
pub fn commit_digest(alg: HashAlg, ts: SimTime, tx_hash: &Digest, booth_hash: &Digest) -> Digest {
    alg.tuple("pre-commit")
        .u64(ts)
        .digest(tx_hash)
        .digest(booth_hash)
        .finish()
}

mod hex_bytes {
    use bytes::Bytes;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Bytes, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bytes, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s)
            .map(Bytes::from)
            .map_err(serde::de::Error::custom)
    }
}

/// One client payload of the configured message size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataEntry {
    #[serde(with = "hex_bytes")]
    pub payload: Bytes,
    pub origin_seq: u64,
}

/// A batch of equally sized entries with consecutive origin sequence
/// numbers, stored as one contiguous payload buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBatch {
    pub first_seq: u64,
    pub entry_size: u32,
    #[serde(with = "hex_bytes")]
    pub payload: Bytes,
    pub batch_hash: Digest,
}

impl DataBatch {
    /// `payload.len()` must be a multiple of `entry_size`.
    pub fn new(first_seq: u64, entry_size: u32, payload: Bytes, alg: HashAlg) -> Self {
        assert!(entry_size > 0 && payload.len() % entry_size as usize == 0);
        let batch_hash = Self::compute_hash(first_seq, entry_size, &payload, alg);
        Self {
            first_seq,
            entry_size,
            payload,
            batch_hash,
        }
    }

    pub fn compute_hash(first_seq: u64, entry_size: u32, payload: &[u8], alg: HashAlg) -> Digest {
        alg.tuple("batch")
            .u64(first_seq)
            .u64(entry_size as u64)
            .field(payload)
            .finish()
    }

    pub fn hash_matches(&self, alg: HashAlg) -> bool {
        self.entry_size > 0
            && self.payload.len() % self.entry_size as usize == 0
            && Self::compute_hash(self.first_seq, self.entry_size, &self.payload, alg)
                == self.batch_hash
    }

    pub fn len(&self) -> usize {
        match self.entry_size {
            0 => 0,
            m => self.payload.len() / m as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = DataEntry> + '_ {
        let m = self.entry_size as usize;
        (0..self.len()).map(move |k| DataEntry {
            payload: self.payload.slice(k * m..(k + 1) * m),
            origin_seq: self.first_seq + k as u64,
        })
    }
}

impl Encode for DataBatch {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.first_seq)
            .u32(self.entry_size)
            .bytes(&self.payload)
            .put(&self.batch_hash);
    }
}

impl Decode for DataBatch {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let first_seq = r.u64()?;
        let entry_size = r.u32()?;
        let payload = r.bytes()?;
        if entry_size == 0 || payload.len() % entry_size as usize != 0 {
            return Err(CodecError::Invalid(
                "batch payload not a whole number of entries",
            ));
        }
        Ok(Self {
            first_seq,
            entry_size,
            payload,
            batch_hash: r.get()?,
        })
    }
}

/// An ordered record on the total order log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub ordering_id: u64,
    pub batch: Arc<DataBatch>,
    pub quorum: Quorum,
    pub booth_ref: Digest,
    pub cert: AggregateSignature,
    /// Proposer's signature over the ordering digest: the (2f+1)-th voice.
    pub proposer_sig: Signature,
    /// The 2f validator replies, kept for validators outside the booth.
    pub replies: Vec<PartialSignature>,
}

impl LogEntry {
    pub fn signed_digest(&self, alg: HashAlg) -> Digest {
        ordering_digest(
            alg,
            self.ordering_id,
            &self.batch.batch_hash,
            &self.booth_ref,
        )
    }

    /// Encoding without the membership fields, which travel as links.
    fn encode_pruned(&self, w: &mut Writer) {
        w.u64(self.ordering_id)
            .put(&*self.batch)
            .put(&self.cert)
            .fixed(&self.proposer_sig.0)
            .seq(&self.replies);
    }
}

/// A run of consecutive entries sharing one (booth, quorum) profile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipLink {
    pub booth_hash: Digest,
    pub quorum: Quorum,
    pub first: u64,
    pub last: u64,
}

impl MembershipLink {
    pub fn covers(&self, id: u64) -> bool {
        self.first <= id && id <= self.last
    }
}

impl Encode for MembershipLink {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.booth_hash)
            .put(&self.quorum)
            .u64(self.first)
            .u64(self.last);
    }
}

impl Decode for MembershipLink {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            booth_hash: r.get()?,
            quorum: r.get()?,
            first: r.u64()?,
            last: r.u64()?,
        })
    }
}

/// Collapses consecutive entries with identical (booth, quorum) into links.
/// `entries` must be sorted by ordering id.
pub fn prune_memberships(entries: &[Arc<LogEntry>]) -> Vec<MembershipLink> {
    let mut links: Vec<MembershipLink> = Vec::new();
    for e in entries {
        match links.last_mut() {
            Some(link) if link.booth_hash == e.booth_ref && link.quorum == e.quorum => {
                link.last = e.ordering_id;
            }
            _ => links.push(MembershipLink {
                booth_hash: e.booth_ref,
                quorum: e.quorum.clone(),
                first: e.ordering_id,
                last: e.ordering_id,
            }),
        }
    }
    links
}

/// Inverse of pruning: the (booth, quorum) for each id, or `None` if some
/// id is covered by no link or by more than one.
pub fn expand_memberships(links: &[MembershipLink], ids: &[u64]) -> Option<Vec<(Digest, Quorum)>> {
    ids.iter()
        .map(|&id| {
            let mut covering = links.iter().filter(|l| l.covers(id));
            let link = covering.next()?;
            if covering.next().is_some() {
                return None;
            }
            Some((link.booth_hash, link.quorum.clone()))
        })
        .collect()
}

/// All entries ordered within one consensus window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub window_start: SimTime,
    pub window_len: SimTime,
    pub entries: Vec<Arc<LogEntry>>,
    pub links: Vec<MembershipLink>,
    pub tx_hash: Digest,
}

impl Transaction {
    /// Builds a transaction from entries sorted by ordering id.
    pub fn new(
        window_start: SimTime,
        window_len: SimTime,
        entries: Vec<Arc<LogEntry>>,
        alg: HashAlg,
    ) -> Self {
        debug_assert!(entries
            .windows(2)
            .all(|w| w[0].ordering_id < w[1].ordering_id));
        let links = prune_memberships(&entries);
        let tx_hash = Self::compute_hash(window_start, window_len, &entries, &links, alg);
        Self {
            window_start,
            window_len,
            entries,
            links,
            tx_hash,
        }
    }

    /// Canonical hash over the window, each entry's (id, batch hash), and
    /// the links. Certificates and replies are evidence, not content.
    pub fn compute_hash(
        window_start: SimTime,
        window_len: SimTime,
        entries: &[Arc<LogEntry>],
        links: &[MembershipLink],
        alg: HashAlg,
    ) -> Digest {
        let mut w = Writer::with_capacity(16 + entries.len() * 40 + links.len() * 64);
        w.u64(window_start).u64(window_len).len(entries.len());
        for e in entries {
            w.u64(e.ordering_id).put(&e.batch.batch_hash);
        }
        w.seq(links);
        alg.tuple("transaction").field(w.as_slice()).finish()
    }

    pub fn hash_matches(&self, alg: HashAlg) -> bool {
        prune_memberships(&self.entries) == self.links
            && Self::compute_hash(
                self.window_start,
                self.window_len,
                &self.entries,
                &self.links,
                alg,
            ) == self.tx_hash
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.ordering_id)
    }

    pub fn first_id(&self) -> Option<u64> {
        self.entries.first().map(|e| e.ordering_id)
    }

    pub fn last_id(&self) -> Option<u64> {
        self.entries.last().map(|e| e.ordering_id)
    }

    pub fn data_entries(&self) -> usize {
        self.entries.iter().map(|e| e.batch.len()).sum()
    }

    pub fn booth_refs(&self) -> BTreeSet<Digest> {
        self.links.iter().map(|l| l.booth_hash).collect()
    }
}

/// Wire form: links once, entries without their membership fields.
impl Encode for Transaction {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.window_start)
            .u64(self.window_len)
            .seq(&self.links)
            .len(self.entries.len());
        for e in &self.entries {
            e.encode_pruned(w);
        }
        w.put(&self.tx_hash);
    }
}

impl Decode for Transaction {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let window_start = r.u64()?;
        let window_len = r.u64()?;
        let links: Vec<MembershipLink> = r.seq()?;
        let n = r.len()?;
        let mut raw = Vec::with_capacity(n);
        for _ in 0..n {
            let ordering_id = r.u64()?;
            let batch = Arc::new(DataBatch::decode(r)?);
            let cert = r.get()?;
            let proposer_sig = Signature(r.fixed()?);
            let replies = r.seq()?;
            raw.push((ordering_id, batch, cert, proposer_sig, replies));
        }
        let tx_hash = r.get()?;
        let ids: Vec<u64> = raw.iter().map(|x| x.0).collect();
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CodecError::Invalid("transaction ids not ascending"));
        }
        let memberships =
            expand_memberships(&links, &ids).ok_or(CodecError::Invalid("entry outside links"))?;
        let entries = raw
            .into_iter()
            .zip(memberships)
            .map(
                |((ordering_id, batch, cert, proposer_sig, replies), (booth_ref, quorum))| {
                    Arc::new(LogEntry {
                        ordering_id,
                        batch,
                        quorum,
                        booth_ref,
                        cert,
                        proposer_sig,
                        replies,
                    })
                },
            )
            .collect();
        Ok(Self {
            window_start,
            window_len,
            entries,
            links,
            tx_hash,
        })
    }
}

#[derive(Clone, Debug)]
struct Appended {
    entry: Arc<LogEntry>,
    appended_at: SimTime,
}

/// One node's total order log for one protocol instance.
#[derive(Clone, Debug, Default)]
pub struct OrderLog {
    entries: BTreeMap<u64, Appended>,
    by_time: BTreeSet<(SimTime, u64)>,
}

impl OrderLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `entry` at time `now`. Returns `Ok(false)` for a duplicate
    /// delivery of the same batch.
    pub fn append_ordered(
        &mut self,
        entry: Arc<LogEntry>,
        now: SimTime,
    ) -> Result<bool, LedgerError> {
        if let Some(existing) = self.entries.get(&entry.ordering_id) {
            if existing.entry.batch.batch_hash == entry.batch.batch_hash {
                return Ok(false);
            }
            return Err(LedgerError::DuplicateOrderingId {
                id: entry.ordering_id,
                existing: existing.entry.batch.batch_hash,
                conflicting: entry.batch.batch_hash,
            });
        }
        self.by_time.insert((now, entry.ordering_id));
        self.entries.insert(
            entry.ordering_id,
            Appended {
                entry,
                appended_at: now,
            },
        );
        Ok(true)
    }

    pub fn get(&self, id: u64) -> Option<&Arc<LogEntry>> {
        self.entries.get(&id).map(|a| &a.entry)
    }

    pub fn appended_at(&self, id: u64) -> Option<SimTime> {
        self.entries.get(&id).map(|a| a.appended_at)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<LogEntry>> {
        self.entries.values().map(|a| &a.entry)
    }

    /// Entries with ids in `[first, last]`, ascending.
    pub fn range(&self, first: u64, last: u64) -> Vec<Arc<LogEntry>> {
        if first > last {
            return Vec::new();
        }
        self.entries
            .range(first..=last)
            .map(|(_, a)| a.entry.clone())
            .collect()
    }

    /// Entries appended in `[ts, ts + len)`, in ordering-id order.
    pub fn window_slice(&self, ts: SimTime, len: SimTime, alg: HashAlg) -> Transaction {
        let mut ids: Vec<u64> = self
            .by_time
            .range((ts, 0)..(ts + len, 0))
            .map(|&(_, id)| id)
            .collect();
        ids.sort_unstable();
        let entries = ids
            .iter()
            .map(|id| self.entries[id].entry.clone())
            .collect();
        Transaction::new(ts, len, entries, alg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub ts: SimTime,
    pub quorum: Quorum,
    pub booth_ref: Digest,
    pub cert: AggregateSignature,
    pub tx_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowRecord {
    Committed {
        tx: Arc<Transaction>,
        commit: CommitRecord,
    },
    /// A window with no entries, closed without a network round.
    Covered { ts: SimTime },
}

impl WindowRecord {
    pub fn ts(&self) -> SimTime {
        match self {
            WindowRecord::Committed { commit, .. } => commit.ts,
            WindowRecord::Covered { ts } => *ts,
        }
    }

    pub fn tx_hash(&self) -> Option<Digest> {
        match self {
            WindowRecord::Committed { commit, .. } => Some(commit.tx_hash),
            WindowRecord::Covered { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    CoverageGap { expected: SimTime, found: SimTime },
    MisalignedWindow,
    UnknownBooth(Digest),
    BadBatchHash { id: u64 },
    EntryOutsideWindow { id: u64 },
    ForeignQuorumMember { id: u64 },
    PivotMissing { id: u64 },
    BadEntryCert { id: u64 },
    IdRepeated { id: u64 },
    BadTxHash,
    CommitTxMismatch,
    BadCommitCert,
    EmptyCommittedWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("window {ts}: {kind:?}")]
pub struct ChainViolation {
    pub ts: SimTime,
    pub kind: ViolationKind,
}

/// Checks that `quorum` is a legal certificate quorum of `booth`.
pub fn quorum_fits(booth: &Booth, quorum: &Quorum) -> Result<(), QuorumFault> {
    if quorum
        .iter()
        .any(|id| !booth.contains(*id) || *id == booth.proposer)
    {
        return Err(QuorumFault::Foreign);
    }
    if !quorum.contains(&booth.pivot) {
        return Err(QuorumFault::PivotMissing);
    }
    if quorum.len() < booth.quorum_size() {
        return Err(QuorumFault::TooSmall);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuorumFault {
    Foreign,
    PivotMissing,
    TooSmall,
}

/// Checks an entry's certificate, falling back to its individual replies
/// plus the proposer signature.
pub fn verify_entry(
    entry: &LogEntry,
    booth: &Booth,
    cache: &VerifyCache,
) -> Result<(), ViolationKind> {
    let id = entry.ordering_id;
    let alg = booth.alg();
    if !entry.batch.hash_matches(alg) {
        return Err(ViolationKind::BadBatchHash { id });
    }
    match quorum_fits(booth, &entry.quorum) {
        Ok(()) => {}
        Err(QuorumFault::PivotMissing) => return Err(ViolationKind::PivotMissing { id }),
        Err(_) => return Err(ViolationKind::ForeignQuorumMember { id }),
    }
    let digest = entry.signed_digest(alg);
    if cache.aggregate(&entry.cert, &digest, &booth.verify_key, &entry.quorum) {
        return Ok(());
    }
    if replies_verify(entry, booth, &digest, cache) {
        Ok(())
    } else {
        Err(ViolationKind::BadEntryCert { id })
    }
}

/// Outsider check: 2f distinct quorum members' replies plus the proposer.
pub fn replies_verify(
    entry: &LogEntry,
    booth: &Booth,
    digest: &Digest,
    cache: &VerifyCache,
) -> bool {
    let Some(proposer) = booth.member(booth.proposer) else {
        return false;
    };
    if !cache.individual(&proposer.verify_key, digest, &entry.proposer_sig) {
        return false;
    }
    let mut signers = BTreeSet::new();
    for reply in &entry.replies {
        if !entry.quorum.contains(&reply.signer) || reply.payload_digest != *digest {
            return false;
        }
        let Some(identity) = booth.member(reply.signer) else {
            return false;
        };
        if !cache.individual(&identity.verify_key, digest, &reply.sig_bytes) {
            return false;
        }
        signers.insert(reply.signer);
    }
    signers.len() >= booth.quorum_size() && signers.contains(&booth.pivot)
}

/// A node's committed ledger for one protocol instance.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    pub window_len: SimTime,
    windows: BTreeMap<SimTime, WindowRecord>,
    booths: BoothBook,
}

impl Ledger {
    pub fn new(window_len: SimTime) -> Self {
        Self {
            window_len,
            ..Self::default()
        }
    }

    /// Records a committed window. Idempotent for the same transaction.
    pub fn record_committed(
        &mut self,
        tx: Arc<Transaction>,
        commit: CommitRecord,
        booths: impl IntoIterator<Item = Arc<Booth>>,
    ) -> Result<bool, LedgerError> {
        let ts = commit.ts;
        if let Some(existing) = self.windows.get(&ts) {
            return match existing.tx_hash() {
                Some(h) if h == commit.tx_hash => Ok(false),
                _ => Err(LedgerError::ConflictingWindow { ts }),
            };
        }
        for b in booths {
            self.booths.insert(b);
        }
        self.windows
            .insert(ts, WindowRecord::Committed { tx, commit });
        Ok(true)
    }

    pub fn record_covered(&mut self, ts: SimTime) -> Result<bool, LedgerError> {
        match self.windows.get(&ts) {
            Some(WindowRecord::Covered { .. }) => Ok(false),
            Some(_) => Err(LedgerError::ConflictingWindow { ts }),
            None => {
                self.windows.insert(ts, WindowRecord::Covered { ts });
                Ok(true)
            }
        }
    }

    pub fn get(&self, ts: SimTime) -> Option<&WindowRecord> {
        self.windows.get(&ts)
    }

    pub fn windows(&self) -> impl Iterator<Item = &WindowRecord> {
        self.windows.values()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn booths(&self) -> &BoothBook {
        &self.booths
    }

    /// Committed transactions in ts order.
    pub fn data_chain(&self) -> impl Iterator<Item = (&Arc<Transaction>, &CommitRecord)> {
        self.windows.values().filter_map(|w| match w {
            WindowRecord::Committed { tx, commit } => Some((tx, commit)),
            WindowRecord::Covered { .. } => None,
        })
    }

    /// Committed membership links in ts order.
    pub fn membership_chain(&self) -> impl Iterator<Item = (SimTime, &MembershipLink)> {
        self.data_chain()
            .flat_map(|(tx, c)| tx.links.iter().map(move |l| (c.ts, l)))
    }

    pub fn committed_ids(&self) -> BTreeSet<u64> {
        self.data_chain().flat_map(|(tx, _)| tx.ids()).collect()
    }

    pub fn committed_entries(&self) -> usize {
        self.data_chain().map(|(tx, _)| tx.data_entries()).sum()
    }

    pub fn tx_hashes(&self) -> BTreeMap<SimTime, Digest> {
        self.data_chain().map(|(_, c)| (c.ts, c.tx_hash)).collect()
    }

    /// End of the contiguous prefix of windows starting at 0.
    pub fn tiled_until(&self) -> SimTime {
        let mut next = 0;
        for ts in self.windows.keys() {
            if *ts != next {
                break;
            }
            next += self.window_len;
        }
        next
    }

    /// Every record is individually valid; gaps are allowed, as on a
    /// validator that sat out some windows.
    pub fn verify_records(&self, cache: &VerifyCache) -> Result<(), ChainViolation> {
        let mut seen_ids = BTreeSet::new();
        for record in self.windows.values() {
            let ts = record.ts();
            let fail = |kind| ChainViolation { ts, kind };
            if self.window_len == 0 || ts % self.window_len != 0 {
                return Err(fail(ViolationKind::MisalignedWindow));
            }
            let WindowRecord::Committed { tx, commit } = record else {
                continue;
            };
            self.verify_committed(tx, commit, cache).map_err(fail)?;
            for id in tx.ids() {
                if !seen_ids.insert(id) {
                    return Err(fail(ViolationKind::IdRepeated { id }));
                }
            }
        }
        Ok(())
    }

    /// Full audit: every record valid and windows tile time from 0 with no
    /// gap between adjacent consensus instances.
    pub fn verify_chain(&self, cache: &VerifyCache) -> Result<(), ChainViolation> {
        let mut expected = 0;
        for ts in self.windows.keys() {
            if *ts != expected {
                return Err(ChainViolation {
                    ts: expected,
                    kind: ViolationKind::CoverageGap {
                        expected,
                        found: *ts,
                    },
                });
            }
            expected += self.window_len;
        }
        self.verify_records(cache)
    }

    fn verify_committed(
        &self,
        tx: &Transaction,
        commit: &CommitRecord,
        cache: &VerifyCache,
    ) -> Result<(), ViolationKind> {
        if tx.is_empty() {
            return Err(ViolationKind::EmptyCommittedWindow);
        }
        if tx.window_start != commit.ts
            || tx.window_len != self.window_len
            || tx.tx_hash != commit.tx_hash
        {
            return Err(ViolationKind::CommitTxMismatch);
        }
        let consensus_booth = self
            .booths
            .get(&commit.booth_ref)
            .ok_or(ViolationKind::UnknownBooth(commit.booth_ref))?;
        let alg = consensus_booth.alg();
        if !tx.hash_matches(alg) {
            return Err(ViolationKind::BadTxHash);
        }
        if quorum_fits(consensus_booth, &commit.quorum).is_err() {
            return Err(ViolationKind::BadCommitCert);
        }
        let digest = commit_digest(alg, commit.ts, &commit.tx_hash, &commit.booth_ref);
        if !cache.aggregate(
            &commit.cert,
            &digest,
            &consensus_booth.verify_key,
            &commit.quorum,
        ) {
            return Err(ViolationKind::BadCommitCert);
        }
        for entry in &tx.entries {
            let booth = self
                .booths
                .get(&entry.booth_ref)
                .ok_or(ViolationKind::UnknownBooth(entry.booth_ref))?;
            verify_entry(entry, booth, cache)?;
        }
        Ok(())
    }

    /// Writes one JSON object per window, with the booth profiles each
    /// committed window references.
    pub fn export_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for record in self.windows.values() {
            let booths: Vec<&Arc<Booth>> = match record {
                WindowRecord::Committed { tx, commit } => {
                    let mut refs = tx.booth_refs();
                    refs.insert(commit.booth_ref);
                    refs.iter().filter_map(|h| self.booths.get(h)).collect()
                }
                WindowRecord::Covered { .. } => Vec::new(),
            };
            let line = LedgerLine {
                window_len: self.window_len,
                record: record.clone(),
                booths: booths.into_iter().cloned().collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn import_jsonl(input: impl BufRead) -> std::io::Result<Self> {
        let mut ledger = Ledger::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LedgerLine = serde_json::from_str(&line)?;
            ledger.window_len = parsed.window_len;
            for b in parsed.booths {
                ledger.booths.insert(b);
            }
            ledger.windows.insert(parsed.record.ts(), parsed.record);
        }
        Ok(ledger)
    }

    /// Removes a window record; used to model a lost or withheld commit.
    pub fn remove_window(&mut self, ts: SimTime) -> Option<WindowRecord> {
        self.windows.remove(&ts)
    }

    /// Replaces a window record without any checks.
    pub fn overwrite_window(&mut self, record: WindowRecord) {
        self.windows.insert(record.ts(), record);
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerLine {
    window_len: SimTime,
    #[serde(flatten)]
    record: WindowRecord,
    booths: Vec<Arc<Booth>>,
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::booth::fixtures::{booth, identity_key};
    use crate::crypto::{aggregate, sign, BoothKeyMaterial, NodeId};

    pub fn batch(seed: u64, len: usize) -> Arc<DataBatch> {
        let payload: Vec<u8> = (0..len * 32)
            .map(|i| (seed as u8).wrapping_add((i / 32) as u8))
            .collect();
        Arc::new(DataBatch::new(
            seed * 1000,
            32,
            Bytes::from(payload),
            HashAlg::Sha256,
        ))
    }

    pub fn endorse(
        id: u64,
        b: Arc<DataBatch>,
        booth: &Booth,
        material: &BoothKeyMaterial,
        signers: &[u32],
    ) -> Arc<LogEntry> {
        let digest = ordering_digest(HashAlg::Sha256, id, &b.batch_hash, &booth.booth_hash);
        let partials: Vec<PartialSignature> = signers
            .iter()
            .map(|&s| {
                let mut p = sign(&identity_key(s), &digest);
                p.share = Some(material.shares[&NodeId(s)].sign(&digest));
                p
            })
            .collect();
        let cert = aggregate(&partials, &material.verify_key).unwrap();
        Arc::new(LogEntry {
            ordering_id: id,
            batch: b,
            quorum: signers.iter().map(|&s| NodeId(s)).collect(),
            booth_ref: booth.booth_hash,
            cert,
            proposer_sig: identity_key(booth.proposer.0).sign_raw(&digest),
            replies: partials.iter().map(|p| p.without_share()).collect(),
        })
    }

    pub fn commit(
        tx: &Transaction,
        booth: &Booth,
        material: &BoothKeyMaterial,
        signers: &[u32],
    ) -> CommitRecord {
        let digest = commit_digest(
            HashAlg::Sha256,
            tx.window_start,
            &tx.tx_hash,
            &booth.booth_hash,
        );
        let partials: Vec<PartialSignature> = signers
            .iter()
            .map(|&s| {
                let mut p = sign(&identity_key(s), &digest);
                p.share = Some(material.shares[&NodeId(s)].sign(&digest));
                p
            })
            .collect();
        CommitRecord {
            ts: tx.window_start,
            quorum: signers.iter().map(|&s| NodeId(s)).collect(),
            booth_ref: booth.booth_hash,
            cert: aggregate(&partials, &material.verify_key).unwrap(),
            tx_hash: tx.tx_hash,
        }
    }

    /// An honest ledger: `windows` windows of Δ=100, two entries each.
    pub fn honest_ledger(windows: u64) -> Ledger {
        let (b, m) = booth(&[0, 1, 2, 3], 11);
        let delta = 100;
        let mut log = OrderLog::new();
        let mut ledger = Ledger::new(delta);
        let mut id = 0;
        for w in 0..windows {
            for k in 0..2 {
                let e = endorse(id, batch(id, 3), &b, &m, &[1, 2]);
                log.append_ordered(e, w * delta + 10 + k * 40).unwrap();
                id += 1;
            }
            let tx = log.window_slice(w * delta, delta, HashAlg::Sha256);
            let c = commit(&tx, &b, &m, &[1, 3]);
            ledger
                .record_committed(Arc::new(tx), c, [b.clone()])
                .unwrap();
        }
        ledger
    }
}
