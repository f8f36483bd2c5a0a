//! Standard normal density and tail helpers.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Upper tail `P(N > u)` for a standard normal; the complementary CDF.
pub fn upper_tail(u: f64) -> f64 {
    0.5 * erfc(u * FRAC_1_SQRT_2)
}

pub fn cdf(u: f64) -> f64 {
    upper_tail(-u)
}

pub fn density(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Density of `N(0, variance)` at `z`.
pub fn gaussian_density(z: f64, variance: f64) -> f64 {
    (-z * z / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
}
