//! Deterministic random number utilities.
//!
//! Every stochastic stage derives its generator from a root seed and a fixed
//! path of integers (stage tag, item index, ...). Derivation is stable across
//! runs and thread counts, so reruns with the same seed reproduce artifacts
//! bit for bit regardless of scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags used when deriving per-item seeds. Centralised so two stages
/// can never collide on the same derivation path.
pub mod stream {
    pub const PHANTOM: u64 = 0x01;
    pub const SIMULATION: u64 = 0x02;
    pub const NETWORK_INIT: u64 = 0x03;
    pub const BOOTSTRAP: u64 = 0x04;
    pub const DROPOUT: u64 = 0x05;
    pub const INFERENCE: u64 = 0x06;
    pub const TESSELLATION: u64 = 0x07;
    pub const DATASET_ID: u64 = 0x08;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a derivation path.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// Generator seeded directly from a u64.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `path` under `root`.
pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive(root, path))
}

/// Standard normal draw via Box-Muller. Consumes exactly two uniforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform direction on the unit sphere (Marsaglia rejection in the disc).
pub fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let a = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(-1.0..1.0);
        let s: f64 = a * a + b * b;
        if s < 1.0 && s > 0.0 {
            let t = 2.0 * (1.0 - s).sqrt();
            return [a * t, b * t, 1.0 - 2.0 * s];
        }
    }
}
