//! Deterministic random numbers.
//!
//! All randomness in the crate flows through [`SeededRng`], a ChaCha8 stream
//! cipher keyed from a 64-bit seed. The key is the little-endian concatenation
//! of four SplitMix64 outputs of the seed, and independent substreams are
//! addressed through ChaCha's 64-bit stream id, so a (seed, stream) pair names
//! one fixed output sequence on every platform.
//!
//! Normal deviates use the Box–Muller transform with the pure-Rust `libm`
//! transcendental functions rather than the platform libm.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLITMIX_MUL1: u64 = 0xBF58_476D_1CE4_E5B9;
const SPLITMIX_MUL2: u64 = 0x94D0_49BB_1331_11EB;

/// One SplitMix64 output for state `x` (Steele, Lea & Flood constants).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
    z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(state).to_le_bytes());
            state = state.wrapping_add(SPLITMIX_GAMMA);
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    /// Substream derived from `(global seed, component name)`.
    pub fn for_component(seed: u64, component: &str) -> Self {
        let digest = Sha256::digest(component.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Self::with_stream(seed, u64::from_le_bytes(bytes))
    }

    /// Independent child stream addressed by `index`. The child depends only
    /// on `(seed, stream, index)`, never on how much of `self` was consumed.
    pub fn substream(&self, index: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(index.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    /// Child stream keyed by the next output of `self`, for handing out
    /// independent work to parallel tasks while advancing the parent.
    pub fn fork(&mut self) -> Self {
        let stream = self.next_u64();
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed from the stream so far.
    pub fn word_position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in the open interval (0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` by 128-bit multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// ±1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Standard normal via the Box–Muller transform; the second
    /// deviate of each pair is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    pub fn normal(&mut self, variance: f64) -> f64 {
        variance.sqrt() * self.standard_normal()
    }

    /// Vector of `n` i.i.d. `N(0, variance)` entries.
    pub fn gaussian_vector(&mut self, n: usize, variance: f64) -> Result<DVector<f64>> {
        if n == 0 {
            return Err(Error::EmptyDimension("gaussian_vector"));
        }
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian_vector variance must be positive, got {variance}"
            )));
        }
        let sd = variance.sqrt();
        Ok(DVector::from_fn(n, |_, _| sd * self.standard_normal()))
    }

    /// Uniformly random unit vector.
    pub fn unit_vector(&mut self, n: usize) -> Result<DVector<f64>> {
        let v = self.gaussian_vector(n, 1.0)?;
        let norm = v.norm();
        Ok(v / norm)
    }
}

/// Free-function form of [`SeededRng::gaussian_vector`].
pub fn gaussian_vector(rng: &mut SeededRng, n: usize, variance: f64) -> Result<DVector<f64>> {
    rng.gaussian_vector(n, variance)
}
