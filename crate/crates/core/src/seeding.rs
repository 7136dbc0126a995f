//! Derivation of independent random streams from the single run seed.
//!
//! Every stream is keyed by a label (`"init"`, `"episode"`, `"sample"`,
//! `"shuffle"`, `"split"`, ...) plus integer coordinates, hashed with SHA-256.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
