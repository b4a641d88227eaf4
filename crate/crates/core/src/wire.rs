//! Protocol messages and their versioned envelope.
//!
//! Layout: `[version u8][tag u8][instance u32][body]`, body fields in the
//! order they are declared below, using the canonical codec.

use std::sync::Arc;

use bytes::Bytes;

use crate::booth::{Booth, Quorum};
use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{AggregateSignature, Digest, Identity, PartialSignature, Signature};
use crate::engine::Lane;
use crate::ledger::{DataBatch, Transaction};
use crate::time::SimTime;

pub const WIRE_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreOrder {
    pub id: u64,
    pub batch: Arc<DataBatch>,
    pub booth: Arc<Booth>,
    pub booth_hash: Digest,
    pub proposer_sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoReply {
    pub id: u64,
    pub partial: PartialSignature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Order {
    pub id: u64,
    pub quorum: Quorum,
    pub cert: AggregateSignature,
}

/// Pre-commit for a validator that saw every entry of the window: it
/// rebuilds the transaction from its own log range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreCommitSeen {
    pub ts: SimTime,
    pub tx_hash: Digest,
    pub first_id: u64,
    pub last_id: u64,
    pub booth: Arc<Booth>,
    pub booth_hash: Digest,
    pub proposer_sig: Signature,
}

/// Pre-commit carrying the full transaction, its reply sets, and the
/// ordering booths needed to resolve every signer's key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreCommitUnseen {
    pub ts: SimTime,
    pub tx_hash: Digest,
    pub tx: Arc<Transaction>,
    pub ordering_booths: Vec<Arc<Booth>>,
    pub booth: Arc<Booth>,
    pub booth_hash: Digest,
    pub proposer_sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PreCommit {
    Seen(PreCommitSeen),
    Unseen(PreCommitUnseen),
}

impl PreCommit {
    pub fn ts(&self) -> SimTime {
        match self {
            PreCommit::Seen(m) => m.ts,
            PreCommit::Unseen(m) => m.ts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcReply {
    pub ts: SimTime,
    pub partial: PartialSignature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Commit {
    pub ts: SimTime,
    pub quorum: Quorum,
    pub booth_hash: Digest,
    pub cert: AggregateSignature,
    pub tx_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraverseEntry {
    pub lifetime: u32,
    pub sig: Signature,
    pub node: Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gossip {
    pub commit: Commit,
    pub commit_hash: Digest,
    pub tx: Arc<Transaction>,
    pub traverse: Vec<TraverseEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GossipAck {
    pub commit_hash: Digest,
    pub propagator: Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    PreOrder(PreOrder),
    PoReply(PoReply),
    Order(Order),
    PreCommit(PreCommit),
    PcReply(PcReply),
    Commit(Commit),
    Gossip(Gossip),
    GossipAck(GossipAck),
    Ping { nonce: u64 },
    Pong { nonce: u64 },
}

/// Which protocol round a message belongs to, for message accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoundKey {
    Ordering(u64),
    Consensus(SimTime),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::PreOrder(_) => 1,
            Message::PoReply(_) => 2,
            Message::Order(_) => 3,
            Message::PreCommit(PreCommit::Seen(_)) => 4,
            Message::PreCommit(PreCommit::Unseen(_)) => 5,
            Message::PcReply(_) => 6,
            Message::Commit(_) => 7,
            Message::Gossip(_) => 8,
            Message::GossipAck(_) => 9,
            Message::Ping { .. } => 10,
            Message::Pong { .. } => 11,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::PreOrder(_) => "pre_order",
            Message::PoReply(_) => "po_reply",
            Message::Order(_) => "order",
            Message::PreCommit(PreCommit::Seen(_)) => "pre_commit_seen",
            Message::PreCommit(PreCommit::Unseen(_)) => "pre_commit_unseen",
            Message::PcReply(_) => "pc_reply",
            Message::Commit(_) => "commit",
            Message::Gossip(_) => "gossip",
            Message::GossipAck(_) => "gossip_ack",
            Message::Ping { .. } => "ping",
            Message::Pong { .. } => "pong",
        }
    }

    pub fn lane(&self) -> Lane {
        match self {
            Message::PreOrder(_) | Message::PoReply(_) | Message::Order(_) => Lane::Ordering,
            Message::PreCommit(_) | Message::PcReply(_) | Message::Commit(_) => Lane::Consensus,
            Message::Gossip(_) | Message::GossipAck(_) => Lane::Gossip,
            Message::Ping { .. } | Message::Pong { .. } => Lane::Control,
        }
    }

    pub fn round(&self) -> Option<RoundKey> {
        match self {
            Message::PreOrder(m) => Some(RoundKey::Ordering(m.id)),
            Message::PoReply(m) => Some(RoundKey::Ordering(m.id)),
            Message::Order(m) => Some(RoundKey::Ordering(m.id)),
            Message::PreCommit(m) => Some(RoundKey::Consensus(m.ts())),
            Message::PcReply(m) => Some(RoundKey::Consensus(m.ts)),
            Message::Commit(m) => Some(RoundKey::Consensus(m.ts)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub instance: u32,
    pub msg: Message,
}

impl Envelope {
    pub fn new(instance: u32, msg: Message) -> Self {
        Self { instance, msg }
    }

    pub fn lane(&self) -> Lane {
        self.msg.lane()
    }

    pub fn encode_to_bytes(&self) -> Bytes {
        Bytes::from(self.to_bytes())
    }
}

impl Encode for PreOrder {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.id)
            .put(&self.batch)
            .put(&self.booth)
            .put(&self.booth_hash)
            .fixed(&self.proposer_sig.0);
    }
}

impl Decode for PreOrder {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            id: r.u64()?,
            batch: r.get()?,
            booth: r.get()?,
            booth_hash: r.get()?,
            proposer_sig: Signature(r.fixed()?),
        })
    }
}

impl Encode for PoReply {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.id).put(&self.partial);
    }
}

impl Decode for PoReply {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            id: r.u64()?,
            partial: r.get()?,
        })
    }
}

impl Encode for Order {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.id).put(&self.quorum).put(&self.cert);
    }
}

impl Decode for Order {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            id: r.u64()?,
            quorum: r.get()?,
            cert: r.get()?,
        })
    }
}

impl Encode for PreCommitSeen {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.ts)
            .put(&self.tx_hash)
            .u64(self.first_id)
            .u64(self.last_id)
            .put(&self.booth)
            .put(&self.booth_hash)
            .fixed(&self.proposer_sig.0);
    }
}

impl Decode for PreCommitSeen {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            ts: r.u64()?,
            tx_hash: r.get()?,
            first_id: r.u64()?,
            last_id: r.u64()?,
            booth: r.get()?,
            booth_hash: r.get()?,
            proposer_sig: Signature(r.fixed()?),
        })
    }
}

impl Encode for PreCommitUnseen {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.ts)
            .put(&self.tx_hash)
            .put(&self.tx)
            .seq(&self.ordering_booths)
            .put(&self.booth)
            .put(&self.booth_hash)
            .fixed(&self.proposer_sig.0);
    }
}

impl Decode for PreCommitUnseen {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            ts: r.u64()?,
            tx_hash: r.get()?,
            tx: r.get()?,
            ordering_booths: r.seq()?,
            booth: r.get()?,
            booth_hash: r.get()?,
            proposer_sig: Signature(r.fixed()?),
        })
    }
}

impl Encode for PcReply {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.ts).put(&self.partial);
    }
}

impl Decode for PcReply {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            ts: r.u64()?,
            partial: r.get()?,
        })
    }
}

impl Encode for Commit {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.ts)
            .put(&self.quorum)
            .put(&self.booth_hash)
            .put(&self.cert)
            .put(&self.tx_hash);
    }
}

impl Decode for Commit {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            ts: r.u64()?,
            quorum: r.get()?,
            booth_hash: r.get()?,
            cert: r.get()?,
            tx_hash: r.get()?,
        })
    }
}

impl Encode for TraverseEntry {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.lifetime).fixed(&self.sig.0).put(&self.node);
    }
}

impl Decode for TraverseEntry {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            lifetime: r.u32()?,
            sig: Signature(r.fixed()?),
            node: r.get()?,
        })
    }
}

impl Encode for Gossip {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.commit)
            .put(&self.commit_hash)
            .put(&self.tx)
            .seq(&self.traverse);
    }
}

impl Decode for Gossip {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            commit: r.get()?,
            commit_hash: r.get()?,
            tx: r.get()?,
            traverse: r.seq()?,
        })
    }
}

impl Encode for GossipAck {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.commit_hash).put(&self.propagator);
    }
}

impl Decode for GossipAck {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Self {
            commit_hash: r.get()?,
            propagator: r.get()?,
        })
    }
}

impl Encode for Envelope {
    fn encode(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION).u8(self.msg.tag()).u32(self.instance);
        match &self.msg {
            Message::PreOrder(m) => m.encode(w),
            Message::PoReply(m) => m.encode(w),
            Message::Order(m) => m.encode(w),
            Message::PreCommit(PreCommit::Seen(m)) => m.encode(w),
            Message::PreCommit(PreCommit::Unseen(m)) => m.encode(w),
            Message::PcReply(m) => m.encode(w),
            Message::Commit(m) => m.encode(w),
            Message::Gossip(m) => m.encode(w),
            Message::GossipAck(m) => m.encode(w),
            Message::Ping { nonce } | Message::Pong { nonce } => {
                w.u64(*nonce);
            }
        }
    }
}

impl Decode for Envelope {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(CodecError::BadVersion(version));
        }
        let tag = r.u8()?;
        let instance = r.u32()?;
        let msg = match tag {
            1 => Message::PreOrder(r.get()?),
            2 => Message::PoReply(r.get()?),
            3 => Message::Order(r.get()?),
            4 => Message::PreCommit(PreCommit::Seen(r.get()?)),
            5 => Message::PreCommit(PreCommit::Unseen(r.get()?)),
            6 => Message::PcReply(r.get()?),
            7 => Message::Commit(r.get()?),
            8 => Message::Gossip(r.get()?),
            9 => Message::GossipAck(r.get()?),
            10 => Message::Ping { nonce: r.u64()? },
            11 => Message::Pong { nonce: r.u64()? },
            other => return Err(CodecError::BadTag(other)),
        };
        Ok(Self { instance, msg })
    }
}
