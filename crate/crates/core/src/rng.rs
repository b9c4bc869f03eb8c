//! Portable, splittable counter-based pseudo-random generator.
//!
//! Output `i` of a stream with key `k` is `mix(k + (i + 1) * GAMMA)` where
//! `mix` is the SplitMix64 finalizer and `GAMMA = 0x9E37_79B9_7F4A_7C15`.
//! Streams are split by hashing the parent key with a stream id, so any
//! component can derive an independent generator from `(seed, purpose, index)`
//! without consuming state from its parent. Results are identical on every
//! platform.

pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a label, used to derive stream ids from names.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: mix(seed ^ 0x6A09_E667_F3BC_C908), counter: 0 }
    }

    /// Independent child stream; does not advance `self`.
    pub fn split(&self, stream: u64) -> Rng {
        Rng { key: mix(self.key ^ mix(stream.wrapping_add(GAMMA))), counter: 0 }
    }

    pub fn split_str(&self, label: &str) -> Rng {
        self.split(hash_str(label))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // rejection sampling keeps the distribution exactly uniform
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal deviate (Box-Muller, one output per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
