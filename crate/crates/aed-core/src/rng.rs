//! Seedable small-state RNG with exact state snapshot/restore.
//!
//! The pair propagator replays hop trajectories from a saved generator
//! state, and snapshot restart must resume the exact draw sequence, so the
//! full state has to be cheap to copy and stable across runs. xoshiro256**
//! (public domain, Blackman & Vigna) fits: 32 bytes of state, `Copy`, and
//! platform-independent output. `rand_distr` supplies the distributions on
//! top of the `rand_core` traits.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// Full generator state; restoring it reproduces the draw sequence exactly.
pub type RngState = [u64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimRng {
    s: RngState,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let s = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        SimRng { s }
    }

    /// Derive an independent stream for trial `index` of an ensemble.
    pub fn for_trial(master_seed: u64, index: u64) -> Self {
        let mut x = master_seed ^ index.wrapping_mul(0xA0761D6478BD642F);
        SimRng::new(splitmix64(&mut x))
    }

    pub fn state(&self) -> RngState {
        self.s
    }

    pub fn restore(state: RngState) -> Self {
        SimRng { s: state }
    }

    #[inline]
    fn next(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1): 53 mantissa bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    pub fn uniform_open01(&mut self) -> f64 {
        ((self.next() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping; bias is < 2^-53 for any n
        // reachable here (particle and cell counts).
        ((self.next() >> 11) as u128 * n as u128 >> 53) as usize
    }

    /// Exponentially distributed waiting time with the given rate:
    /// inverse CDF, t = -ln(u)/rate with u uniform on (0, 1].
    #[inline]
    pub fn exp_time(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -self.uniform_open01().ln() / rate
    }

    /// Standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Poisson-distributed count with the given mean (0 mean gives 0).
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        rand_distr::Poisson::new(mean)
            .expect("poisson mean must be finite and positive")
            .sample(self) as u64
    }

    /// Uniform unit vector in `dim` dimensions (circle or sphere).
    pub fn unit_vector(&mut self, dim: usize) -> [f64; 3] {
        match dim {
            2 => {
                let theta = 2.0 * std::f64::consts::PI * self.uniform();
                [theta.cos(), theta.sin(), 0.0]
            }
            3 => {
                // Marsaglia: z uniform on [-1,1], azimuth uniform.
                let z = 2.0 * self.uniform() - 1.0;
                let theta = 2.0 * std::f64::consts::PI * self.uniform();
                let r = (1.0 - z * z).max(0.0).sqrt();
                [r * theta.cos(), r * theta.sin(), z]
            }
            _ => panic!("dimension must be 2 or 3"),
        }
    }
}

impl RngCore for SimRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

impl SeedableRng for SimRng {
    type Seed = [u8; 32];

    fn from_seed(seed: Self::Seed) -> Self {
        let mut s = [0u64; 4];
        for (i, w) in s.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&seed[i * 8..(i + 1) * 8]);
            *w = u64::from_le_bytes(b);
        }
        if s == [0; 4] {
            return SimRng::new(0);
        }
        SimRng { s }
    }

    fn seed_from_u64(state: u64) -> Self {
        SimRng::new(state)
    }
}
