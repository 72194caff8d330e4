//! Seeding and sampling helpers shared across modules.
//!
//! Every stochastic stage in the crate draws from its own ChaCha stream whose
//! seed is derived from a master seed plus a stable string label. Streams are
//! therefore independent of each other and of evaluation order, which is what
//! makes per-speaker generation and per-stage training reproducible even if
//! the surrounding code is reorganized.

use rand::Rng;
use sha2::{Digest, Sha256};

/// Stable per-stream seed derivation: hash of the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// One standard normal draw (Box–Muller).
pub(crate) fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
