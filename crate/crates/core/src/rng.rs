//! Seeded, platform-independent random streams.
//!
//! Every consumer derives a ChaCha8 stream from a 64-bit seed plus a stream
//! id, so draws for one layer (or one epoch) never depend on how many numbers
//! another consumer pulled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the non-layer consumers. Layer streams use the layer index.
pub mod streams {
    pub const DATA_ORDER: u64 = 1 << 32;
    pub const DATASET: u64 = 2 << 32;
    pub const SPLIT: u64 = 3 << 32;
    pub const NOISE: u64 = 4 << 32;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_repeatable() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 0), |r, _: u64| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 0), |r, _: u64| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 1), |r, _: u64| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
