use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use super::aggregate::{verify_aggregate, AggregateSignature, BoothVerifyKey};
use super::hash::{Digest, HashAlg};
use super::identity::{verify_individual, NodeId, Signature, VerifyKey};
use crate::codec::Encode;

const CAPACITY: usize = 1 << 16;

/// Memoizes signature checks by their exact inputs.
///
/// Every simulated node in a run checks the same certificates, and checks
/// are pure functions of their inputs, so sharing outcomes changes nothing
/// but wall-clock time. Modeled CPU cost is charged by callers regardless.
#[derive(Debug, Default)]
pub struct VerifyCache {
    memo: Mutex<HashMap<Digest, bool>>,
}

impl VerifyCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn lookup(&self, key: Digest, check: impl FnOnce() -> bool) -> bool {
        if let Some(hit) = self.memo.lock().expect("cache poisoned").get(&key) {
            return *hit;
        }
        let outcome = check();
        let mut memo = self.memo.lock().expect("cache poisoned");
        if memo.len() >= CAPACITY {
            memo.clear();
        }
        memo.insert(key, outcome);
        outcome
    }

    pub fn individual(&self, key: &VerifyKey, digest: &Digest, sig: &Signature) -> bool {
        let k = HashAlg::Sha256
            .tuple("memo-individual")
            .field(&key.0)
            .digest(digest)
            .field(&sig.0)
            .finish();
        self.lookup(k, || verify_individual(key, digest, sig))
    }

    pub fn aggregate(
        &self,
        agg: &AggregateSignature,
        digest: &Digest,
        key: &BoothVerifyKey,
        signers: &BTreeSet<NodeId>,
    ) -> bool {
        let k = HashAlg::Sha256
            .tuple("memo-aggregate")
            .encoded(agg)
            .digest(digest)
            .digest(&key.fingerprint_cached())
            .field(&signers.to_bytes())
            .finish();
        self.lookup(k, || verify_aggregate(agg, digest, key, signers))
    }
}
