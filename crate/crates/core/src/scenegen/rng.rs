//! Counter-based generator used for every seeded draw in the crate.
//!
//! Algorithm (kept stable so fixtures can be regenerated in any language):
//!
//! ```text
//! mix(z):  z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!          z ^= z >> 27; z *= 0x94D049BB133111EB;
//!          z ^= z >> 31                                  (wrapping u64)
//! key      = mix(seed ^ mix(stream + 1))
//! word(i)  = mix(key + (i + 1) * 0x9E3779B97F4A7C15)     (i = 0, 1, 2, ...)
//! uniform  = (word >> 11) * 2^-53                        in [0, 1)
//! normal   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)          two words per draw
//! ```
//!
//! Independent streams (scene layout, per-box patterns, background noise, ...)
//! use distinct `stream` ids so that adding draws to one never shifts another.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix(seed ^ mix(stream.wrapping_add(1))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `0..n` (`n > 0`).
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_words() {
        // splitmix64 finalizer of 0 and 1
        assert_eq!(mix(0), 0);
        assert_eq!(mix(1), 0x5692_161D_100B_05E5);
        let mut a = CounterRng::new(42, 0);
        let mut b = CounterRng::new(42, 0);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(CounterRng::new(42, 1).next_u64(), xs[0]);
        assert_ne!(CounterRng::new(43, 0).next_u64(), xs[0]);
    }

    #[test]
    fn moments_are_sane() {
        let mut r = CounterRng::new(7, 3);
        let n = 200_000;
        let (mut s, mut s2, mut u) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = r.normal();
            s += z;
            s2 += z * z;
            u += r.uniform();
        }
        let n = n as f64;
        assert!((s / n).abs() < 0.01);
        assert!((s2 / n - 1.0).abs() < 0.02);
        assert!((u / n - 0.5).abs() < 0.005);
    }
}
