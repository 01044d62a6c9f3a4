//! Deterministic random number generation.
//!
//! All randomness in the crate flows through [`SplitMix64`], a 64-bit
//! splitmix-derived generator with a pinned algorithm so that runs are
//! bit-reproducible across platforms. Named sub-streams are derived from a
//! run seed so that independent consumers (data generation, parameter init,
//! batch shuffling, the random token mixer) never interleave.

/// SplitMix64 generator (Steele, Lea & Flood; Vigna's reference constants).
///
/// State advances by the golden-gamma increment; output is the finalized
/// mix of the new state. Integer-only, so the stream is identical on every
/// platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent named sub-stream from a base seed.
    ///
    /// The salt is hashed through one splitmix round together with the seed,
    /// so distinct roles get decorrelated streams.
    pub fn stream(seed: u64, salt: u64) -> Self {
        let mut mixer = SplitMix64::new(seed ^ salt.rotate_left(17));
        let s = mixer.next_u64();
        SplitMix64::new(s)
    }

    /// Raw state accessor for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(state: u64) -> Self {
        SplitMix64 { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform f64 in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f32 in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform f32 in [-a, a).
    pub fn uniform_sym(&mut self, a: f32) -> f32 {
        (self.next_f64() * 2.0 - 1.0) as f32 * a
    }

    /// Uniform integer in [0, n). Rejection-free modulo is acceptable here:
    /// n is always tiny relative to 2^64 so the bias is unobservable.
    pub fn next_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller on two uniforms.
    pub fn next_gaussian(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_usize(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stream salts for the run-level consumers.
pub mod salt {
    pub const DATA: u64 = 0x5EED_DA7A;
    pub const INIT: u64 = 0x5EED_1217;
    pub const SHUFFLE: u64 = 0x5EED_5837;
    pub const MIXER: u64 = 0x5EED_3117;
    pub const GATE: u64 = 0x5EED_6A7E;
}
