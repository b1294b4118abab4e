//! Named, splittable random streams.
//!
//! A stream is a 256-bit key. Children are derived by hashing the parent key
//! with a label or an index, so any stochastic op can be handed its own
//! stream without threading mutable generator state through the program.
//! Each key seeds a ChaCha8 generator (a counter-mode cipher).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: [u8; 32],
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"lvmae/root");
        h.update(seed.to_le_bytes());
        RngStream { key: h.finalize().into() }
    }

    pub fn split(&self, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([1u8]);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        RngStream { key: h.finalize().into() }
    }

    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([2u8]);
        h.update(i.to_le_bytes());
        RngStream { key: h.finalize().into() }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_numbers() {
        let a: u64 = RngStream::new(7).split("mask").index(3).rng().random();
        let b: u64 = RngStream::new(7).split("mask").index(3).rng().random();
        assert_eq!(a, b);
    }

    #[test]
    fn different_paths_differ() {
        let root = RngStream::new(7);
        assert_ne!(root.split("a"), root.split("b"));
        assert_ne!(root.index(0), root.index(1));
        assert_ne!(RngStream::new(7), RngStream::new(8));
    }
}
