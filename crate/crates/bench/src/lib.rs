//! Fixtures shared by the benchmarks.

use bytes::Bytes;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use vguard_core::crypto::{setup_booth_keys, BoothKeyMaterial, HashAlg, IdentityKey, NodeId};

/// Deterministic payload of `len` bytes.
pub fn payload(len: usize) -> Bytes {
    (0..len)
        .map(|i| (i * 31 % 251) as u8)
        .collect::<Vec<_>>()
        .into()
}

pub fn identity(id: u32) -> IdentityKey {
    let mut seed = [7u8; 32];
    seed[..4].copy_from_slice(&id.to_le_bytes());
    IdentityKey::from_seed(NodeId(id), seed)
}

/// Key material for a booth of `n` members with threshold `2f`.
pub fn booth(n: u32) -> BoothKeyMaterial {
    let members: Vec<_> = (0..n).map(NodeId).collect();
    let f = (n as usize - 1) / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    setup_booth_keys(&members, 2 * f, HashAlg::Sha256, &mut rng).expect("valid booth")
}
