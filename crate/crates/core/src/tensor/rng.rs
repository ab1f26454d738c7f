use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Reproducible random stream: ChaCha8 keyed by a 64-bit seed.
///
/// ChaCha output is specified bit-for-bit, so a seed produces the same
/// stream on every platform. Derived streams (`fork`) mix a label into the
/// seed with SplitMix64, which keeps per-step and per-sample streams
/// independent of thread scheduling.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for `(seed, labels...)`, independent of any other stream's state.
    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        let mut s = splitmix64(seed);
        for &l in labels {
            s = splitmix64(s ^ splitmix64(l.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        }
        Self::new(s)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = SeededRng::derive(1, &[0, 1]);
        let mut b = SeededRng::derive(1, &[1, 0]);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = SeededRng::derive(1, &[0, 1]);
        let mut d = SeededRng::derive(1, &[0, 1]);
        assert_eq!(c.next_u64(), d.next_u64());
    }
}
