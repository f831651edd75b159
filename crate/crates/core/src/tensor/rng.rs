//! Counter-based deterministic random number streams.
//!
//! Each draw hashes `(key, counter)` through the SplitMix64 finalizer, so a
//! stream is a pure function of `(seed, stream_id, counter)`: sequences are
//! reproducible across runs and platforms, and disjoint stream ids give
//! statistically independent streams without shared state.

/// Weyl increment from SplitMix64 (golden-ratio constant).
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// Stream-id decorrelation salt (PCG multiplier constant).
const STREAM_SALT: u64 = 0x5851_F42D_4C95_7F2D;

/// Stafford variant 13 of the SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A splittable counter-based RNG stream. Single-owner by design: parallel
/// consumers take distinct stream ids instead of sharing one stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    key: u64,
    counter: u64,
    cached_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(seed).wrapping_add(mix64(stream_id.wrapping_mul(STREAM_SALT) ^ seed));
        Self {
            seed,
            stream_id,
            key,
            counter: 0,
            cached_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives an independent stream keyed off this stream's identity.
    pub fn substream(&self, id: u64) -> Self {
        Self::new(self.seed, mix64(self.stream_id ^ id.wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ self.counter.wrapping_mul(GOLDEN_GAMMA))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform integer in [0, bound) by rejection-free 128-bit widening.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller in f64; generates pairs and caches one.
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log argument positive.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
