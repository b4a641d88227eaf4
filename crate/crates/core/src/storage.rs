//! Per-node storage: one storage master instance (SMI) per (instance, role),
//! each split into a temporary layer with a retention policy and a
//! permanent layer that only explicit deletes shrink.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::ledger::{CommitRecord, Transaction};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Proposer,
    Validator,
    Gossiper,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Proposer => "proposer",
            Role::Validator => "validator",
            Role::Gossiper => "gossiper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RetentionPolicy {
    /// Temporary entries expire `tau` after registration.
    Timed { tau: SimTime },
    /// The temporary layer keeps at most `capacity` entries, oldest evicted.
    Fifo { capacity: usize },
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy::Timed {
            tau: 24 * 3600 * 1_000_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("transaction already in the permanent layer")]
    AlreadyPermanent,
    #[error("transaction not in the expected layer")]
    NotFound,
    #[error("a node keeps at most one proposer SMI")]
    SecondProposer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredTx {
    pub tx: Arc<Transaction>,
    pub commit: CommitRecord,
}

impl StoredTx {
    pub fn hash(&self) -> Digest {
        self.tx.tx_hash
    }
}

#[derive(Clone, Debug)]
struct TempEntry {
    stored: StoredTx,
    registered_at: SimTime,
    seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Temp,
    Perm,
}

#[derive(Serialize)]
struct SnapshotLine<'a> {
    layer: Layer,
    #[serde(skip_serializing_if = "Option::is_none")]
    registered_at: Option<SimTime>,
    tx: &'a Transaction,
    commit: &'a CommitRecord,
}

/// One storage master instance.
#[derive(Clone, Debug)]
pub struct Smi {
    role: Role,
    policy: RetentionPolicy,
    temp: BTreeMap<Digest, TempEntry>,
    /// Registration order of temp entries: (registered_at, seq) → hash.
    order: BTreeMap<(SimTime, u64), Digest>,
    perm: BTreeMap<Digest, StoredTx>,
    next_seq: u64,
}

impl Smi {
    pub fn new(role: Role, policy: RetentionPolicy) -> Self {
        Self {
            role,
            policy,
            temp: BTreeMap::new(),
            order: BTreeMap::new(),
            perm: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layer_of(&self, h: &Digest) -> Option<Layer> {
        if self.temp.contains_key(h) {
            Some(Layer::Temp)
        } else if self.perm.contains_key(h) {
            Some(Layer::Perm)
        } else {
            None
        }
    }

    pub fn get(&self, h: &Digest) -> Option<&StoredTx> {
        self.temp
            .get(h)
            .map(|e| &e.stored)
            .or_else(|| self.perm.get(h))
    }

    pub fn registered_at(&self, h: &Digest) -> Option<SimTime> {
        self.temp.get(h).map(|e| e.registered_at)
    }

    pub fn temp_len(&self) -> usize {
        self.temp.len()
    }

    pub fn perm_len(&self) -> usize {
        self.perm.len()
    }

    /// Registers into the temporary layer. Re-registering keeps the
    /// original timestamp and returns `Ok(false)`.
    pub fn register_to_temp(
        &mut self,
        stored: StoredTx,
        now: SimTime,
    ) -> Result<bool, StorageError> {
        let h = stored.hash();
        if self.perm.contains_key(&h) {
            return Err(StorageError::AlreadyPermanent);
        }
        if self.temp.contains_key(&h) {
            return Ok(false);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.order.insert((now, seq), h);
        self.temp.insert(
            h,
            TempEntry {
                stored,
                registered_at: now,
                seq,
            },
        );
        if let RetentionPolicy::Fifo { capacity } = self.policy {
            while self.temp.len() > capacity {
                let (_, oldest) = self.order.pop_first().expect("order mirrors temp");
                self.temp.remove(&oldest);
            }
        }
        Ok(true)
    }

    /// Drops expired temporary entries; returns how many went.
    pub fn cleanup_temp(&mut self, now: SimTime) -> usize {
        let RetentionPolicy::Timed { tau } = self.policy else {
            return 0;
        };
        let mut removed = 0;
        while let Some((&(at, _), &h)) = self.order.first_key_value() {
            if now.saturating_sub(at) < tau {
                break;
            }
            self.order.pop_first();
            self.temp.remove(&h);
            removed += 1;
        }
        removed
    }

    pub fn move_to_perm(&mut self, h: &Digest) -> Result<(), StorageError> {
        let e = self.temp.remove(h).ok_or(StorageError::NotFound)?;
        self.order.remove(&(e.registered_at, e.seq));
        self.perm.insert(*h, e.stored);
        Ok(())
    }

    pub fn delete_perm(&mut self, h: &Digest) -> Result<StoredTx, StorageError> {
        self.perm.remove(h).ok_or(StorageError::NotFound)
    }

    /// Writes both layers as line-delimited JSON, permanent entries first.
    pub fn snapshot(&self, out: impl Write) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        for s in self.perm.values() {
            let line = SnapshotLine {
                layer: Layer::Perm,
                registered_at: None,
                tx: &s.tx,
                commit: &s.commit,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        for h in self.order.values() {
            let e = &self.temp[h];
            let line = SnapshotLine {
                layer: Layer::Temp,
                registered_at: Some(e.registered_at),
                tx: &e.stored.tx,
                commit: &e.stored.commit,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

/// All SMIs of one node.
#[derive(Clone, Debug, Default)]
pub struct StorageMaster {
    policy: RetentionPolicy,
    smis: BTreeMap<(u32, Role), Smi>,
}

impl StorageMaster {
    pub fn new(policy: RetentionPolicy) -> Self {
        Self {
            policy,
            smis: BTreeMap::new(),
        }
    }

    pub fn smi(&self, instance: u32, role: Role) -> Option<&Smi> {
        self.smis.get(&(instance, role))
    }

    pub fn smi_mut(&mut self, instance: u32, role: Role) -> Result<&mut Smi, StorageError> {
        if role == Role::Proposer
            && self
                .smis
                .keys()
                .any(|(i, r)| *r == Role::Proposer && *i != instance)
        {
            return Err(StorageError::SecondProposer);
        }
        let policy = self.policy;
        Ok(self
            .smis
            .entry((instance, role))
            .or_insert_with(|| Smi::new(role, policy)))
    }

    pub fn register(
        &mut self,
        instance: u32,
        role: Role,
        stored: StoredTx,
        now: SimTime,
    ) -> Result<bool, StorageError> {
        self.smi_mut(instance, role)?.register_to_temp(stored, now)
    }

    pub fn cleanup(&mut self, now: SimTime) -> usize {
        self.smis.values_mut().map(|s| s.cleanup_temp(now)).sum()
    }

    /// Proposer plus validator SMIs: the instances this node caters to.
    pub fn catering(&self) -> usize {
        self.smis
            .keys()
            .filter(|(_, r)| *r != Role::Gossiper)
            .count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u32, Role), &Smi)> {
        self.smis.iter()
    }

    /// One `<instance>.<role>.log` file per SMI.
    pub fn snapshot_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for ((instance, role), smi) in &self.smis {
            smi.snapshot(File::create(dir.join(format!("{instance}.{role}.log")))?)?;
        }
        Ok(())
    }
}
