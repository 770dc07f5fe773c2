//! Deterministic random numbers via splitmix64.
//!
//! Every stochastic piece of the kit (weight init, shuffles, synthetic data,
//! gradient-check coordinate sampling) draws from this one generator so runs
//! are bit-reproducible from a seed alone. Uniform doubles come from the top
//! 53 bits of each output word; Gaussians from the Box-Muller transform.

/// splitmix64: a 64-bit state walked by a fixed odd constant, with an output
/// mixing function. Small, fast, and easy to reproduce in any language.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    /// Spare Gaussian from the last Box-Muller pair.
    gauss_spare: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            state: seed,
            gauss_spare: None,
        }
    }

    /// Generator for an auxiliary stream (per-epoch shuffles, per-class
    /// splits). Decorrelates `stream` from `seed` by golden-ratio mixing.
    pub fn derive(seed: u64, stream: u64) -> Self {
        SplitMix64::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Gaussian sample via Box-Muller. Each transform yields two values; the
    /// second is cached and returned by the next call.
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return mean + sd * z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        mean + sd * r * theta.cos()
    }

    /// Fisher-Yates shuffle, in place.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
