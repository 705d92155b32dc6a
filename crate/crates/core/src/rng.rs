//! Seeded random streams.
//!
//! Every stochastic consumer (latent draws, gradient-penalty interpolation,
//! epoch shuffling, phantom geometry, weight init) derives its own child
//! stream from one root seed and a fixed label, so toggling one consumer
//! never shifts another's sequence. Streams used inside the training loop
//! are additionally keyed by the global iteration, which makes resumption
//! from a checkpoint reproduce the uninterrupted run exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Deterministic child stream: seed = SHA-256(root || label || index).
pub fn child_stream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Uniform draw in `[0, 1)`.
pub fn uniform01<E: Scalar>(rng: &mut impl RngCore) -> E {
    E::lit(rng.gen::<f64>())
}

/// Standard normal draw via Box-Muller (one value per call; the cosine
/// branch only, so the stream layout is one normal per two uniforms).
pub fn standard_normal<E: Scalar>(rng: &mut impl RngCore) -> E {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let r = (-2.0 * u1.ln()).sqrt();
            return E::lit(r * (2.0 * std::f64::consts::PI * u2).cos());
        }
    }
}

/// Fill a buffer with standard normal draws.
pub fn normal_vec<E: Scalar>(rng: &mut impl RngCore, n: usize) -> Vec<E> {
    (0..n).map(|_| standard_normal::<E>(rng)).collect()
}

/// Fisher-Yates shuffle of `0..n`, deterministic per stream.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}
