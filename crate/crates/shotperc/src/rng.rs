//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a stream addressed by
//! `(seed, path)` where `path` is a short label sequence such as
//! `[experiment, replica]` or `[experiment, replica, cell]`. The stream for a
//! given address is always the same regardless of execution order or thread
//! count, which is what makes replicas and cells independently reproducible
//! and experiment output byte-identical across `--threads` settings.
//!
//! Derivation: the address words are absorbed into a splitmix64 chain and the
//! squeezed words key a ChaCha8 generator. Distinct addresses give
//! statistically independent streams; this is a simulation-grade separation,
//! not a cryptographic one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Derives the ChaCha8 stream addressed by `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut acc = 0x243F_6A88_85A3_08D3u64;
    let mut absorb = |w: u64| {
        acc = mix64(acc.wrapping_add(GAMMA) ^ w);
    };
    absorb(seed);
    absorb(path.len() as u64);
    for &w in path {
        absorb(w);
    }
    let mut key = [0u8; 32];
    for chunk in 0..4 {
        acc = mix64(acc.wrapping_add(GAMMA));
        key[chunk * 8..(chunk + 1) * 8].copy_from_slice(&acc.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable label words for the sub-streams of one replica. Only the
/// within-replica structure lives here; experiments prepend their own ids.
pub mod label {
    pub const POINTS: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CELL: u64 = 3;
    pub const BASELINE: u64 = 4;
    pub const PERCOLATION: u64 = 5;
    pub const EXPERIMENT: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_address_same_stream() {
        let mut a = stream(7, &[1, 2, 3]);
        let mut b = stream(7, &[1, 2, 3]);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_addresses_diverge() {
        let mut base = stream(7, &[1, 2, 3]);
        let first = base.next_u64();
        // seed, path content, path length, and word order all separate streams
        assert_ne!(stream(8, &[1, 2, 3]).next_u64(), first);
        assert_ne!(stream(7, &[1, 2, 4]).next_u64(), first);
        assert_ne!(stream(7, &[1, 2]).next_u64(), first);
        assert_ne!(stream(7, &[3, 2, 1]).next_u64(), first);
        // empty path is a valid distinct address
        assert_ne!(stream(7, &[]).next_u64(), first);
    }

    #[test]
    fn stream_draws_are_unbiased_enough_for_smoke() {
        // crude frequency check: mean of 10^5 uniform u64 high bits near 1/2
        let mut r = stream(0, &[9]);
        let n = 100_000;
        let ones: u64 = (0..n).map(|_| r.next_u64() >> 63).sum();
        let p = ones as f64 / n as f64;
        assert!((p - 0.5).abs() < 0.01, "high-bit frequency {p}");
    }
}
