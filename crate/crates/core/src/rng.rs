//! Seeded RNG streams.
//!
//! Every random consumer (weight init, data order, augmentation, random
//! scores) draws from its own labeled substream so that changing one
//! consumer cannot shift the values any other consumer sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte substream seed from a base seed and a label.
pub fn substream_seed(base: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// RNG for the labeled substream of `base`.
pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(substream_seed(base, label))
}

/// RNG for a per-epoch substream (data order, augmentation).
pub fn epoch_stream(base: u64, label: &str, epoch: usize) -> ChaCha8Rng {
    stream(base, &format!("{label}/{epoch}"))
}

/// Derive a new base seed for a labeled consumer.
pub fn derive(base: u64, label: &str) -> u64 {
    let s = substream_seed(base, label);
    u64::from_le_bytes(s[..8].try_into().expect("seed is 32 bytes"))
}
