//! Deterministic random number generation.
//!
//! Everything that draws randomness in this crate goes through [`Rng`]
//! (a splitmix64 stream) or [`counter_uniform`] (a stateless counter-based
//! generator used for dropout so that training runs are replayable).

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sequential splitmix64 generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream, e.g. one per epoch or per subsystem.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(mix(self.state ^ tag.wrapping_mul(GOLDEN) ^ 0x5851_f42d_4c95_7f2d))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        // 24 high bits give a float with full mantissa coverage.
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo is fine here: n is tiny compared to 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller.
    pub fn gauss(&mut self) -> f32 {
        let u1 = (self.next_f64()).max(1e-12);
        let u2 = self.next_f64();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stateless uniform in [0, 1) keyed by (seed, site, step, index).
///
/// Used for dropout masks: the value at a given element depends only on the
/// key, never on how many draws happened before it.
pub fn counter_uniform(seed: u64, site: u64, step: u64, index: u64) -> f32 {
    let z = mix(
        seed.wrapping_mul(GOLDEN)
            ^ site.rotate_left(17)
            ^ step.wrapping_mul(0xd6e8_feb8_6659_fd93)
            ^ index.rotate_left(41),
    );
    (z >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
}

/// FNV-1a hash of a name, used to derive stable dropout site ids.
pub fn site_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
