//! Named, splittable RNG streams derived from one master seed.
//!
//! Every consumer of randomness (weight init, partitioning, per-round
//! selection, per-device shuffling, ...) gets its own stream keyed by a label
//! and a list of indices. Streams never share state, so the order in which
//! parallel work executes cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed from `master`, a stream label and a path of indices.
pub fn derive_seed(master: u64, label: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(fnv1a(label)));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(GOLDEN)));
    }
    h
}

/// A fresh stream seeded directly from `seed`.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Source of named streams for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, label: &str, path: &[u64]) -> u64 {
        derive_seed(self.master, label, path)
    }

    pub fn stream(&self, label: &str, path: &[u64]) -> Stream {
        stream(self.seed(label, path))
    }
}
