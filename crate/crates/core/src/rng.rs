//! Seed derivation for per-sample random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Mixes a global seed with a sample id and epoch so that every
/// (sample, epoch) pair gets an independent, reproducible stream.
pub fn derive_seed(global: u64, sample_id: &str, epoch: u64) -> u64 {
    let h = splitmix64(global ^ fnv1a(sample_id.as_bytes()));
    splitmix64(h ^ splitmix64(epoch.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn sample_rng(global: u64, sample_id: &str, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, sample_id, epoch))
}

/// Child seed for a named stream within one run.
pub fn stream_seed(global: u64, stream: &str) -> u64 {
    splitmix64(global ^ fnv1a(stream.as_bytes()))
}
