use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Seedable deterministic generator.
///
/// Child streams are derived from the seed and a label only, never from the
/// current position of the parent stream, so siblings do not influence each
/// other no matter in which order they are drawn from.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream identified by a label.
    pub fn split(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Child stream identified by an index.
    pub fn split_index(&self, index: u64) -> Rng {
        Rng::new(splitmix64(
            splitmix64(self.seed).wrapping_add(splitmix64(index.wrapping_add(0x5851_f42d))),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Matrix with entries i.i.d. uniform on `[-bound, bound)`.
    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(-bound, bound))
    }
}

/// Kaiming-uniform initialization with ReLU gain: entries drawn from
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Result<Matrix> {
    if fan_in == 0 {
        return Err(Error::invalid("kaiming_uniform: fan_in must be at least 1"));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    Ok(rng.uniform_matrix(rows, cols, bound))
}
