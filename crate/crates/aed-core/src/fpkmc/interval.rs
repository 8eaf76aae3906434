//! Exact single-axis diffusion propagators on an absorbing interval, and
//! the cube (product-of-intervals) samplers built from them.
//!
//! Everything is dimensionless: a walker starts at the center of [-1, 1]
//! with unit length scale, and tau = D t / L^2. Two independent series
//! represent every quantity — an eigenfunction expansion (efficient at
//! large tau) and a method-of-images sum (efficient at small tau) — with
//! the crossover at tau = 0.2. Both are truncated below 1e-12 and must
//! agree in the overlap window (checked in tests).
//!
//! For the interval with absorbing ends and a centered start:
//!   survival      S(tau) = sum_{n odd} (4 / n pi) (-1)^((n-1)/2) e^(-n^2 pi^2 tau / 4)
//!                        = 1 - 2 sum_{k>=0} (-1)^k erfc((2k+1) / (2 sqrt(tau)))
//!   exit density  f(tau) = -dS/dtau
//!   no-passage density c1(xi, tau) prop. to
//!                 sum_{n odd} cos(n pi xi / 2) e^(-n^2 pi^2 tau / 4).

use crate::rng::SimRng;
use crate::vecmath::Vector;
use std::sync::OnceLock;

const CROSSOVER: f64 = 0.2;
const TRUNCATION: f64 = 1e-12;
const TAU_MIN: f64 = 1e-12;
const TAU_MAX: f64 = 25.0;
const TABLE_N: usize = 1024;

/// Survival probability: no exit from the interval by dimensionless time tau.
pub fn survival(tau: f64) -> f64 {
    if tau <= 0.0 {
        return 1.0;
    }
    if tau < CROSSOVER {
        // Image sum. a = 1/(2 sqrt(tau)) >= 1.118 here, so terms die fast.
        let a = 0.5 / tau.sqrt();
        let mut exit = 0.0;
        let mut sign = 1.0;
        let mut k = 0;
        loop {
            let term = libm::erfc((2 * k + 1) as f64 * a);
            exit += sign * term;
            if term < TRUNCATION || k > 16 {
                break;
            }
            sign = -sign;
            k += 1;
        }
        1.0 - 2.0 * exit
    } else {
        let mut s = 0.0;
        let mut n = 1u32;
        let mut sign = 1.0;
        loop {
            let nf = n as f64;
            let term = 4.0 / (nf * std::f64::consts::PI)
                * (-nf * nf * std::f64::consts::PI * std::f64::consts::PI * tau / 4.0).exp();
            s += sign * term;
            if term < TRUNCATION {
                break;
            }
            sign = -sign;
            n += 2;
        }
        s
    }
}

/// First-passage time density (both walls), -dS/dtau.
pub fn exit_density(tau: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    if tau < CROSSOVER {
        let mut f = 0.0;
        let mut sign = 1.0;
        let mut k = 0;
        loop {
            let a = (2 * k + 1) as f64 / 2.0;
            let term = 2.0 * a / (std::f64::consts::PI.sqrt() * tau.powf(1.5))
                * (-a * a / tau).exp();
            f += sign * term;
            if term < TRUNCATION || k > 16 {
                break;
            }
            sign = -sign;
            k += 1;
        }
        f
    } else {
        let mut f = 0.0;
        let mut n = 1u32;
        let mut sign = 1.0;
        loop {
            let nf = n as f64;
            let term = nf * std::f64::consts::PI
                * (-nf * nf * std::f64::consts::PI * std::f64::consts::PI * tau / 4.0).exp();
            f += sign * term;
            if term < TRUNCATION {
                break;
            }
            sign = -sign;
            n += 2;
        }
        f
    }
}

/// Unnormalized no-passage CDF: integral of the surviving density from -1
/// to xi. F(-1) = 0 and F(1) = survival(tau).
pub fn no_passage_cdf(xi: f64, tau: f64) -> f64 {
    let xi = xi.clamp(-1.0, 1.0);
    if tau < CROSSOVER {
        // Images at 4k (positive) and 4k + 2 (negative), sd = sqrt(2 tau).
        let inv = 0.5 / tau.sqrt(); // 1 / (sd sqrt(2))
        let phi = |x: f64, c: f64| 0.5 * libm::erfc(-(x - c) * inv);
        let mut f = 0.0;
        for k in -3i32..=3 {
            let c_pos = 4.0 * k as f64;
            let c_neg = 4.0 * k as f64 + 2.0;
            f += phi(xi, c_pos) - phi(-1.0, c_pos);
            f -= phi(xi, c_neg) - phi(-1.0, c_neg);
        }
        f
    } else {
        let mut f = 0.0;
        let mut n = 1u32;
        let mut sign = 1.0;
        loop {
            let nf = n as f64;
            let decay =
                (-nf * nf * std::f64::consts::PI * std::f64::consts::PI * tau / 4.0).exp();
            let term = 2.0 / (nf * std::f64::consts::PI)
                * ((nf * std::f64::consts::PI * xi / 2.0).sin() + sign)
                * decay;
            f += term;
            if 4.0 / (nf * std::f64::consts::PI) * decay < TRUNCATION {
                break;
            }
            sign = -sign;
            n += 2;
        }
        f
    }
}

fn invert_survival(u: f64, mut lo: f64, mut hi: f64) -> f64 {
    // S is strictly decreasing: S(lo) >= u >= S(hi).
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if survival(mid) > u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    let mut tau = 0.5 * (lo + hi);
    // Newton polish on S(tau) - u = 0 (S' = -f).
    for _ in 0..3 {
        let f = exit_density(tau);
        if f <= 0.0 {
            break;
        }
        let step = (survival(tau) - u) / f;
        let next = tau + step;
        if next > lo && next < hi {
            tau = next;
        }
    }
    tau
}

/// Tabulated inverse of the survival function on a uniform quantile grid;
/// built once, shared by every sampler.
fn tau_table() -> &'static [f64; TABLE_N + 1] {
    static TABLE: OnceLock<[f64; TABLE_N + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; TABLE_N + 1];
        t[0] = TAU_MAX;
        t[TABLE_N] = TAU_MIN;
        for (i, slot) in t.iter_mut().enumerate().take(TABLE_N).skip(1) {
            let u = i as f64 / TABLE_N as f64;
            *slot = invert_survival(u, TAU_MIN, TAU_MAX);
        }
        t
    })
}

/// Sample the dimensionless first-passage time from the center of the
/// interval: tau = S^{-1}(u) with u uniform on (0, 1]. Table bracket plus
/// bisection/Newton refinement.
pub fn sample_exit_tau(rng: &mut SimRng) -> f64 {
    let u = rng.uniform_open01();
    let table = tau_table();
    let idx = ((u * TABLE_N as f64) as usize).min(TABLE_N - 1);
    // S decreasing: larger u sits at smaller tau.
    let hi = table[idx];
    let lo = table[idx + 1];
    invert_survival(u, lo, hi).clamp(TAU_MIN, TAU_MAX)
}

/// Sample the surviving walker's position at time tau (inverse CDF by
/// bisection); strictly interior.
pub fn sample_no_passage_xi(rng: &mut SimRng, tau: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let target = rng.uniform() * survival(tau);
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if no_passage_cdf(mid, tau) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).clamp(-1.0 + 1e-12, 1.0 - 1e-12)
}

/// A cube first-passage event: which axis exited, on which side, when.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubeExit {
    pub elapsed: f64,
    pub axis: usize,
    pub side: f64, // +1 or -1
}

/// First passage out of a centered axis-aligned box with per-axis
/// half-widths `half`: per-axis interval exits are independent, the box
/// exit is their minimum.
pub fn sample_cube_exit(
    rng: &mut SimRng,
    dim: usize,
    half: &Vector,
    diffusivity: f64,
) -> CubeExit {
    debug_assert!(diffusivity > 0.0);
    let mut best = CubeExit {
        elapsed: f64::INFINITY,
        axis: 0,
        side: 1.0,
    };
    for axis in 0..dim {
        let l = half[axis];
        debug_assert!(l > 0.0, "degenerate cube axis");
        let t = sample_exit_tau(rng) * l * l / diffusivity;
        if t < best.elapsed {
            best = CubeExit {
                elapsed: t,
                axis,
                side: 0.0,
            };
        }
    }
    best.side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    best
}

/// Displacement from the cube center at the sampled exit: the exit axis is
/// pinned on its wall, the rest drawn from their no-passage densities at
/// the exit time.
pub fn sample_cube_exit_position(
    rng: &mut SimRng,
    dim: usize,
    half: &Vector,
    diffusivity: f64,
    exit: &CubeExit,
) -> Vector {
    let mut d = [0.0; 3];
    for axis in 0..dim {
        let l = half[axis];
        if axis == exit.axis {
            d[axis] = exit.side * l;
        } else {
            let tau = diffusivity * exit.elapsed / (l * l);
            d[axis] = l * sample_no_passage_xi(rng, tau);
        }
    }
    d
}

/// Displacement of a walker that provably stays inside the box up to
/// `elapsed` (no-passage propagation; elapsed <= 0 is the identity).
pub fn sample_cube_no_passage(
    rng: &mut SimRng,
    dim: usize,
    half: &Vector,
    diffusivity: f64,
    elapsed: f64,
) -> Vector {
    let mut d = [0.0; 3];
    if elapsed <= 0.0 {
        return d;
    }
    for axis in 0..dim {
        let l = half[axis];
        let tau = diffusivity * elapsed / (l * l);
        d[axis] = l * sample_no_passage_xi(rng, tau);
    }
    d
}
