//! Keyed, splittable random streams.
//!
//! A [`RandomStream`] is identified by `(seed, stream id)`. Two streams with
//! the same key produce identical draws; distinct ids are decorrelated by a
//! SplitMix64 finalizer before seeding a xoshiro256++ generator. Particle
//! filters derive one stream per `(particle, step)` so their output does not
//! depend on evaluation order.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine two 64-bit keys into one.
#[inline]
pub fn mix_keys(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b).rotate_left(23))
}

/// Hash of a time index, used to build per-step particle stream ids.
#[inline]
pub fn step_hash(t: usize) -> u64 {
    splitmix64((t as u64).wrapping_add(0x5EED_0000_0000_0001))
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
    inner: Xoshiro256PlusPlus,
}

impl RandomStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            inner: Xoshiro256PlusPlus::seed_from_u64(mix_keys(seed, stream)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream with the same seed and a derived id. Does not advance `self`.
    pub fn split(&self, id: u64) -> Self {
        Self::new(self.seed, mix_keys(self.stream, id))
    }

    /// Draw a fresh key from this stream and open a new stream family with it.
    pub fn fork(&mut self) -> Self {
        let key = self.inner.next_u64();
        Self::new(key, 0)
    }
}

impl RngCore for RandomStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
