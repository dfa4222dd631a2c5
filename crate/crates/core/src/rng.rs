//! Reproducible randomness.
//!
//! Uniform bits come from ChaCha8 keyed with four SplitMix64 outputs of the
//! seed (little-endian), so a given seed yields the same stream on every
//! platform. Standard normals use the Box–Muller transform on pairs of
//! uniforms: `u1 = (k1 + 1)·2⁻⁵³ ∈ (0, 1]`, `u2 = k2·2⁻⁵³ ∈ [0, 1)` with
//! `k = next_u64 >> 11`; the pair yields `r·cos(2πu2)` first, then
//! `r·sin(2πu2)`, with `r = √(−2 ln u1)`.
//!
//! Tensors are filled in storage order: channel-major, then row-major.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor3};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser applied to `x + γ`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for parallel consumers: `splitmix64(parent ^ splitmix64(index))`.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index))
}

/// Hashes a byte string into a seed (FNV-1a 64 followed by SplitMix64).
pub fn seed_from_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
    position: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self {
            seed,
            inner: ChaCha8Rng::from_seed(key),
            spare: None,
            position: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of standard-normal values drawn so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(child_seed(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    pub fn normal(&mut self) -> f64 {
        self.position += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn randn(&mut self, dims: Dims) -> Result<Tensor3> {
        if dims.channels == 0 || dims.height == 0 || dims.width == 0 {
            return Err(Error::shape(format!("cannot draw a {dims} tensor")));
        }
        let data = (0..dims.len()).map(|_| self.normal()).collect();
        Tensor3::from_vec(dims, data)
    }
}
