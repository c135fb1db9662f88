//! Deterministic pseudo-random generators vendored for cross-platform
//! reproducibility.
//!
//! Audit artifacts must be byte-identical across machines, OSes, and crate
//! upgrades, so the two generators the harness depends on are pinned here
//! rather than pulled from an external crate: SplitMix64 for seed expansion
//! and sample plans, xoshiro256** for the bootstrap index streams. Both match
//! the reference implementations bit for bit (see the known-answer tests).

/// SplitMix64 stream. One `u64` of state, full 2^64 period.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..bound` via modulo reduction.
    ///
    /// The modulo bias is below 2^-32 for every bound used by the harness
    /// (corpus sizes, resample counts); determinism matters more here than
    /// removing it.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a positive bound");
        self.next_u64() % bound
    }
}

/// xoshiro256** stream, state filled from SplitMix64 as in the reference
/// seeding recipe.
#[derive(Debug, Clone)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        Xoshiro256StarStar { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `0..bound` via modulo reduction (same trade-off as
    /// [`SplitMix64::next_below`]).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a positive bound");
        self.next_u64() % bound
    }
}

/// FNV-1a 64-bit hash. Stable across platforms, used to fold string context
/// (dataset ids, cell labels) into generator seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// The harness-wide derived stream: one xoshiro256** generator per
/// (seed, context label) pair, so distinct statistics never share a stream
/// and every stream is reproducible from the run seed alone.
pub fn seeded_rng(seed: u64, context_label: &str) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed ^ fnv1a64(context_label.as_bytes()))
}
