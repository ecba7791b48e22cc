//! Deterministic pseudo-random numbers via splitmix64.
//!
//! Every random decision in the crate flows from a single `u64` seed through
//! this generator. Independent streams (one per sample, per parameter group,
//! and so on) are derived with [`Rng::derived`] so that adding a consumer
//! never shifts the draws seen by another.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// splitmix64 generator. Small state, full 64-bit period, and cheap to fork.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Stream `stream` of the generator family rooted at `seed`. Streams with
    /// distinct indices are decorrelated by scrambling the index into the
    /// state before the first draw.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let salt = stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA);
        let mut rng = Rng { state: seed ^ mix(salt) };
        rng.next_u64();
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// One draw from the standard normal (Box-Muller, cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps the log finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below() needs a nonzero bound");
        (self.next_f64() * bound as f64) as usize % bound
    }
}
