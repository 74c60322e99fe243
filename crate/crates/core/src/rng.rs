//! Seeded random streams shared by every stochastic component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`, so that e.g. the negative
/// pairing and the augmentation flips never consume each other's draws.
pub fn stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform index in `0..n` other than `skip`. `n` must be at least 2.
pub fn index_except<R: Rng + ?Sized>(rng: &mut R, n: usize, skip: usize) -> usize {
    debug_assert!(n >= 2 && skip < n);
    let j = rng.random_range(0..n - 1);
    if j >= skip {
        j + 1
    } else {
        j
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
