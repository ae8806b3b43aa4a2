//! Seeded counter-based pseudo-random numbers.
//!
//! All randomness in the crate funnels through [`SplitMix64`], a 64-bit
//! counter-based generator (Steele, Lea & Flood's SplitMix64 finalizer over an
//! incrementing Weyl sequence). The constants are fixed here so that identical
//! seeds produce identical streams on every platform:
//!
//! * Weyl increment: `0x9E37_79B9_7F4A_7C15`
//! * mix multipliers: `0xBF58_476D_1CE4_E5B9`, `0x94D0_49BB_1331_11EB`
//!
//! Sub-streams are derived with [`derive_seed`], which mixes a stream tag and
//! an index into the root seed through the same finalizer. The derivation is
//! part of the on-disk reproducibility contract: manifests and checkpoints
//! record only the root seed.

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX2: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX2);
    z ^ (z >> 31)
}

/// Derive a reproducible sub-seed from a root seed, a stream tag, and an index.
///
/// `stream` separates purposes (scene generation, augmentation, noise, ...);
/// `index` separates items within a purpose (scene number, step number, ...).
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    mix(root
        .wrapping_add(mix(stream.wrapping_mul(WEYL)))
        .wrapping_add(mix(index ^ 0xA5A5_A5A5_A5A5_A5A5)))
}

/// SplitMix64 generator state.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitMix64 {
    state: u64,
    /// Cached second Box-Muller variate.
    #[serde(default)]
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            state: seed,
            spare_normal: None,
        }
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(WEYL);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller, second variate cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.normal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = SplitMix64::new(1);
        let mut b = SplitMix64::new(2);
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn derive_seed_separates_streams_and_indices() {
        let root = 7;
        assert_ne!(derive_seed(root, 0, 0), derive_seed(root, 1, 0));
        assert_ne!(derive_seed(root, 0, 0), derive_seed(root, 0, 1));
        assert_eq!(derive_seed(root, 3, 9), derive_seed(root, 3, 9));
    }

    #[test]
    fn uniform_range_and_moments() {
        let mut rng = SplitMix64::new(123);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
            sum += x;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = SplitMix64::new(99);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
