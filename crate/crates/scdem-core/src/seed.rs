//! Deterministic seed derivation so each subsystem gets an independent,
//! reproducible RNG from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a salt.
pub fn derive(master: u64, salt: u64) -> u64 {
    mix(master ^ mix(salt))
}

/// Fresh RNG for a (master, salt) pair.
pub fn rng(master: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, salt))
}

/// Salt namespaces, spaced out so enumerated sub-salts never collide.
pub mod salts {
    pub const DATA: u64 = 0x01_0000;
    pub const BACKBONE_INIT: u64 = 0x02_0000;
    pub const BACKBONE_SOURCE: u64 = 0x03_0000;
    pub const PRETRAIN_SHUFFLE: u64 = 0x04_0000;
    pub const EXPERT_INIT: u64 = 0x05_0000;
    pub const SELECTOR_INIT: u64 = 0x06_0000;
    pub const EPOCH_SHUFFLE: u64 = 0x07_0000;
}
