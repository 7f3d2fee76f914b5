//! Seed derivation for reproducible parallel computation.
//!
//! Every randomized routine in this crate draws from a ChaCha stream keyed by
//! `(seed, domain, index)`. Streams are independent of thread scheduling, so
//! parallel probe evaluations, Monte Carlo replications, and k-means restarts
//! produce identical results regardless of worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain separators for the independent RNG streams used across the crate.
/// Keeping them in one place avoids accidental stream collisions.
#[derive(Debug, Clone, Copy)]
pub enum StreamDomain {
    TraceProbe = 1,
    LeverageProbe = 2,
    McReplication = 3,
    KmeansRestart = 4,
    DrawBatch = 5,
    SimEffects = 6,
    SimAssignment = 7,
    SimNoise = 8,
    DiagProbe = 9,
    IdentificationProbe = 10,
    AnnihilatorSample = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream RNG for `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(splitmix64(domain as u64) ^ index));
    rng
}

/// Derived seed for nested structures (e.g. the per-replication DGP seed).
pub fn derive_seed(seed: u64, domain: StreamDomain, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(splitmix64(domain as u64).wrapping_add(index)))
}
