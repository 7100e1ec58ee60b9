//! Seeded generators. Every random choice in the crate goes through these so
//! runs are reproducible across platforms and thread counts.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for sub-stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(mix64(seed ^ mix64(stream)))
}

/// Counter-based pair of independent standard normals keyed by
/// `(seed, stream, index)`, via Box–Muller on two hashed uniforms.
pub fn normal_pair(seed: u64, stream: u64, index: u64) -> (f64, f64) {
    let key = mix64(seed ^ mix64(stream ^ mix64(index)));
    let a = mix64(key);
    let b = mix64(key ^ 0xD1B5_4A32_D192_ED03);
    // (0, 1] so the log is finite
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}
