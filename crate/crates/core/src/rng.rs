//! Deterministic randomness derivation.
//!
//! Every random draw in a run is keyed off a single master seed through
//! SHA-256, so results depend only on the seed and the data, never on
//! iteration order, shard layout, or thread scheduling. Streams for bulk
//! sampling are ChaCha12 generators seeded from the digest; one-shot per-unit
//! draws use the digest directly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Domain tag for the Bernoulli sample/remainder split.
pub const DOMAIN_PARTITION: &str = "partition";
/// Domain tag for per-unit group retention when a unit exceeds its group cap.
pub const DOMAIN_GROUP_SELECT: &str = "group-select";
/// Domain tag for the private quantile walk (indexed per tuned parameter).
pub const DOMAIN_QUANTILE: &str = "quantile";
/// Domain tag for release noise and thresholding.
pub const DOMAIN_FINALIZE: &str = "finalize";

fn digest(master_seed: u64, domain: &str, tail: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(master_seed.to_le_bytes());
    for part in tail {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.finalize().into()
}

/// Stream generator for `(master_seed, domain, index)`, e.g. one per tuned
/// parameter or one per simulation trial.
pub fn derive_stream(master_seed: u64, domain: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(digest(master_seed, domain, &[&index.to_le_bytes()]))
}

/// Uniform `u64` keyed by unit id. Stable across runs and input order.
pub fn unit_draw(master_seed: u64, domain: &str, unit_id: &str) -> u64 {
    let d = digest(master_seed, domain, &[unit_id.as_bytes()]);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Uniform `u64` keyed by unit id plus an arbitrary payload (e.g. a group
/// key), used to rank a unit's groups for deterministic retention.
pub fn keyed_rank(master_seed: u64, domain: &str, unit_id: &str, payload: &[&[u8]]) -> u64 {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(payload.len() + 1);
    parts.push(unit_id.as_bytes());
    parts.extend_from_slice(payload);
    let d = digest(master_seed, domain, &parts);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
