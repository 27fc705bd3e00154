//! Seeding contract: one root seed fans out into named substreams, and
//! cohort generation additionally splits per unit. Streams are counter-based
//! (ChaCha), so any unit can be generated on any worker with identical bytes.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Named substream of a root seed ("sim", "init", "batching", ...).
pub fn substream(seed: u64, label: &str) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(fnv64(label.as_bytes()));
    rng
}

/// Per-unit stream inside a named substream.
pub fn unit_substream(seed: u64, label: &str, unit_id: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(fnv64(label.as_bytes()) ^ unit_id.wrapping_mul(0x9e3779b97f4a7c15));
    rng
}
