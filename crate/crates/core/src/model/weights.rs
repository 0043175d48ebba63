//! Seeded weight initialization.
//!
//! Each tensor gets its own ChaCha8 keystream. The 32-byte key is
//! `seed (u64 LE) || layer (u64 LE, u64::MAX for global tensors) ||
//! fnv1a64(name) (u64 LE) || 0u64`, the stream starts at block 0, and
//! element `i` is the `i`-th 32-bit output word `w` mapped to
//! `-0.08 + 0.16 * (w >> 8) / 2^24`. Any ChaCha8 implementation reproduces
//! the fixtures from this description.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INIT_RANGE: f32 = 0.08;
pub const GLOBAL_LAYER: u64 = u64::MAX;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tensor_key(seed: u64, layer: u64, name: &str) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&layer.to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
    key
}

pub fn uniform_tensor(seed: u64, layer: u64, name: &str, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::from_seed(tensor_key(seed, layer, name));
    (0..len)
        .map(|_| {
            let unit = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
            -INIT_RANGE + 2.0 * INIT_RANGE * unit
        })
        .collect()
}
