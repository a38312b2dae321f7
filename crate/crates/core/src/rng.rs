//! Deterministic pseudo-random number generation.
//!
//! Masks, random factor matrices and data shuffles must be reproducible
//! bit-for-bit on both sides of the update protocol, so this module pins the
//! generator instead of deferring to an external crate whose stream could
//! change between versions. Seed expansion uses splitmix64, the stream is
//! xoshiro256**. The wire header identifies this scheme as algorithm id 0.

/// Algorithm id recorded in package headers for this generator family.
pub const PRNG_ALGORITHM_ID: u8 = 0;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 state. Used for seed expansion and seed derivation only.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Derives an independent stream seed for a named purpose.
///
/// Each purpose tag owns a disjoint stream so that, for example, mask
/// generation and batch shuffling never consume from the same sequence.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    SplitMix64::new(seed ^ tag.wrapping_mul(GOLDEN_GAMMA)).next_u64()
}

/// Stream purpose tags. Part of the reproducibility contract: the edge
/// re-derives masks and random factors from (header seed, tag).
pub mod tags {
    pub const WEIGHT_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SUBSET: u64 = 3;
    pub const RM_MASK: u64 = 4;
    pub const LRU_FACTORS: u64 = 5;
    pub const KA_INIT: u64 = 6;
    pub const SYNTH_DATA: u64 = 7;
}

/// xoshiro256** stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    /// Expands a 64-bit seed into the full state via splitmix64.
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        Self {
            s: [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()],
        }
    }

    /// Stream for a named purpose: `seed_from_u64(derive_seed(seed, tag))`.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Self::seed_from_u64(derive_seed(seed, tag))
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

    /// Uniform f64 in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform integer in [0, n) by rejection sampling.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle, iterating from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
