//! Seed derivation. Every random stream is a ChaCha8 generator keyed by the
//! run seed, a purpose tag and up to two counters, so any stream can be
//! rebuilt from its coordinates without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Episode = 2,
    Synthetic = 3,
    Coverage = 4,
    Gradcheck = 5,
}

pub fn derive(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
