//! Counter-based random streams.
//!
//! A stream is keyed by `(seed, module, round)`; within a stream the ChaCha
//! block counter plays the role of the draw index. Two streams with different
//! keys never share state, so rounds and configs can be generated in any
//! order (or in parallel) with identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Identifies which component consumes a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ModuleId {
    Sampling = 1,
    PrimalDualInner = 2,
    PrimalDualSelect = 3,
    Instances = 4,
    RewardNoise = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    seed: u64,
    module: ModuleId,
    round: u64,
    inner: ChaCha20Rng,
}

impl StreamRng {
    pub fn new(seed: u64, module: ModuleId, round: u64) -> Self {
        let mut key = [0u8; 32];
        let mut z = seed;
        for chunk in key.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(((module as u64) << 40) ^ round);
        StreamRng {
            seed,
            module,
            round,
            inner,
        }
    }

    /// Number of 32-bit words consumed so far.
    pub fn draw_index(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Jumps to an absolute draw index.
    pub fn set_draw_index(&mut self, index: u128) {
        self.inner.set_word_pos(index);
    }

    /// Digest of the full stream position.
    pub fn digest(&self) -> u64 {
        let pos = self.draw_index();
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.module as u64);
        h = splitmix64(h ^ self.round);
        h = splitmix64(h ^ (pos as u64));
        splitmix64(h ^ ((pos >> 64) as u64))
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` (`n > 0`), via rejection to avoid modulo bias.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Draw from a finite distribution given by nonnegative weights.
    pub fn categorical(&mut self, cdf: &[f64]) -> usize {
        let total = *cdf.last().expect("nonempty cdf");
        let u = self.uniform() * total;
        match cdf.iter().position(|&c| u < c) {
            Some(i) => i,
            None => cdf.len() - 1,
        }
    }
}

impl rand::TryRng for StreamRng {
    type Error = core::convert::Infallible;

    fn try_next_u32(&mut self) -> Result<u32, Self::Error> {
        Ok(self.inner.next_u32())
    }

    fn try_next_u64(&mut self) -> Result<u64, Self::Error> {
        Ok(self.inner.next_u64())
    }

    fn try_fill_bytes(&mut self, dst: &mut [u8]) -> Result<(), Self::Error> {
        self.inner.fill_bytes(dst);
        Ok(())
    }
}

/// Cumulative sums of nonnegative weights; entries below zero count as zero.
pub fn cumulative(weights: &[f64]) -> alloc::vec::Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|&w| {
            acc += w.max(0.0);
            acc
        })
        .collect()
}
