//! Stochastic particle engine for McKean–Vlasov SDEs whose drift is a singular
//! kernel convolved against the law of the solution (the random vortex method).
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: singular kernels, initial vorticity fields, empirical-law convolution
//! - [`bounds`]: structure constants, sharp heat-kernel and Aronson envelopes, I/J audits
//! - [`drift`]: space-time drift fields on a box grid
//! - [`sde`]: Euler–Maruyama paths, Cameron–Martin weights, Feynman–Kac, KDE
//! - [`fixedpoint`]: the map `b -> K<>b` and its Picard iteration
//! - [`vortex`]: the lattice particle system and vorticity/velocity recovery
//!
//! Points are stored as fixed `[f64; 3]` arrays; coordinates beyond the working
//! dimension are kept at zero.

// `!(x > 0.0)` rejects NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod drift;
pub mod error;
pub mod fixedpoint;
pub mod io;
pub mod kernel;
pub mod quad;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod vortex;

pub use error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// A point or vector in `R^d`, `d <= 3`, padded with zeros.
pub type Point = [f64; MAX_DIM];

/// A `d x d` matrix padded with zeros, row-major (`m[i][j] = K^i_j`).
pub type Mat = [[f64; MAX_DIM]; MAX_DIM];

pub const ZERO: Point = [0.0; MAX_DIM];

#[inline]
pub fn norm(x: &Point) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

#[inline]
pub fn norm2(x: &Point) -> f64 {
    x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `K w` for a padded matrix.
#[inline]
pub fn mat_vec(m: &Mat, w: &Point) -> Point {
    [
        m[0][0] * w[0] + m[0][1] * w[1] + m[0][2] * w[2],
        m[1][0] * w[0] + m[1][1] * w[1] + m[1][2] * w[2],
        m[2][0] * w[0] + m[2][1] * w[1] + m[2][2] * w[2],
    ]
}

/// Builds a padded point from a slice of length `<= 3`.
pub fn point(coords: &[f64]) -> Point {
    let mut p = ZERO;
    p[..coords.len()].copy_from_slice(coords);
    p
}

pub(crate) fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d > MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "dimension {d} not supported (1..={MAX_DIM})"
        )));
    }
    Ok(())
}
