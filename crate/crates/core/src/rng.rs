//! Seeded randomness shared by every component.
//!
//! All randomness flows through ChaCha8 streams keyed by a 64-bit seed, which
//! produce identical sequences on every platform. Shuffles use the classic
//! Fisher–Yates walk from the last position down, drawing `j ∈ [0, i]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named purpose from a base seed.
pub fn derive(seed: u64, stream: &str) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn shuffle<T>(items: &mut [T], rng: &mut SeededRng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

pub fn permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, rng);
    idx
}
