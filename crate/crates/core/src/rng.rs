//! Reproducible random streams.
//!
//! Every random quantity in the crate is drawn from a [`RandomStream`] obtained
//! by walking a [`StreamKey`] down a path of indices (base seed, replicate,
//! attempt, particle, ...). Streams never depend on scheduling order, so a
//! replicate produces the same bits whatever thread runs it.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the tree of derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed ^ GOLDEN))
    }

    /// Key of the `index`-th child. Distinct indices give unrelated keys.
    #[inline]
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix64(self.0 ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    /// Child for a named purpose (bridge sampling, survivor sampling, ...).
    pub fn tagged(self, tag: &str) -> Self {
        let h = tag
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.child(h)
    }

    pub fn stream(self) -> RandomStream {
        RandomStream::from_key(self)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// Position of one replicate in a seeded experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPath {
    pub base: u64,
    pub replicate: u64,
}

impl SeedPath {
    pub fn new(base: u64, replicate: u64) -> Self {
        SeedPath { base, replicate }
    }

    pub fn key(self) -> StreamKey {
        StreamKey::new(self.base).child(self.replicate)
    }
}

/// Single-owner pseudo random stream (xoshiro256++).
#[derive(Debug, Clone)]
pub struct RandomStream {
    inner: Xoshiro256PlusPlus,
}

impl RandomStream {
    pub fn seed_from_u64(seed: u64) -> Self {
        StreamKey::new(seed).stream()
    }

    pub fn from_key(key: StreamKey) -> Self {
        RandomStream { inner: Xoshiro256PlusPlus::seed_from_u64(key.0) }
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
