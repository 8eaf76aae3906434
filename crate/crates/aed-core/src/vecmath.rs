//! Dimension-generic vector helpers.
//!
//! Positions and velocities are `[f64; 3]` regardless of the configured
//! dimension; in 2D the z component is kept at exactly 0.0 and every loop
//! runs over `0..dim`.

pub type Vector = [f64; 3];

pub const ZERO: Vector = [0.0; 3];

#[inline]
pub fn dot(a: &Vector, b: &Vector, dim: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..dim {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub fn norm_sq(a: &Vector, dim: usize) -> f64 {
    dot(a, a, dim)
}

#[inline]
pub fn norm(a: &Vector, dim: usize) -> f64 {
    norm_sq(a, dim).sqrt()
}

#[inline]
pub fn sub(a: &Vector, b: &Vector) -> Vector {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vector, b: &Vector) -> Vector {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vector, s: f64) -> Vector {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn axpy(y: &mut Vector, a: f64, x: &Vector) {
    for k in 0..3 {
        y[k] += a * x[k];
    }
}
