//! Seeded randomness. Every stochastic step in the pipeline draws from a
//! ChaCha8 stream keyed by a user seed plus a fixed stream tag, so reruns
//! with the same config are bit-identical and parallel workers never share
//! generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; mixes a seed with a stream tag.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed for a named parallel stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags for the pipeline's independent random streams.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const FOLDS: u64 = 2;
    pub const BATCH_ORDER: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const PHANTOM: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream_is_identical() {
        let mut a = rng_for(7, stream::INIT);
        let mut b = rng_for(7, stream::INIT);
        for _ in 0..32 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = rng_for(7, stream::INIT);
        let mut b = rng_for(7, stream::FOLDS);
        let same = (0..32).filter(|_| a.random::<u64>() == b.random::<u64>()).count();
        assert_eq!(same, 0);
    }
}
