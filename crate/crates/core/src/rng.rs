//! Named, counter-based random streams.
//!
//! Every random draw in the crate comes from a [`StreamRng`] derived from a
//! `(seed, label, index)` triple. The stream key is the first eight bytes of
//! SHA-256 over that triple; output `i` of a stream is the SplitMix64
//! finalizer applied to `key + i * GOLDEN`. Draws are therefore independent
//! of scheduling and platform.

use rand_core::{impls, RngCore};
use sha2::{Digest, Sha256};

/// Identifier recorded in run manifests.
pub const ALGORITHM: &str = "splitmix64-counter/sha256-stream-key";

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_key(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

impl StreamRng {
    /// Stream for `label`/`index` under a global seed.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        Self {
            key: stream_key(seed, label, index),
            counter: 0,
        }
    }

    /// Sub-stream of this stream. Does not consume draws from `self`.
    pub fn child(&self, label: &str, index: u64) -> Self {
        Self {
            key: stream_key(self.key, label, index),
            counter: 0,
        }
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
