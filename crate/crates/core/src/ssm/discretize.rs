use crate::error::{Error, Result};

/// Below this `|Δ·a|` the input gain uses its first-order limit `Δ·b`.
pub const SMALL_Z: f64 = 1e-8;

/// `(e^z − 1)/z`, equal to 1 inside the small-`z` branch.
#[inline]
pub(crate) fn phi(z: f64) -> f64 {
    if z.abs() < SMALL_Z {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// `(e^z, (e^z − 1)/z)` from a single `exp_m1` call.
#[inline]
pub(crate) fn zoh_terms(z: f64) -> (f64, f64) {
    let em1 = z.exp_m1();
    let ph = if z.abs() < SMALL_Z { 1.0 } else { em1 / z };
    (em1 + 1.0, ph)
}

/// `d/dz (e^z − 1)/z` given precomputed `e^z` and `(e^z − 1)/z`.
#[inline]
pub(crate) fn phi_prime_from(z: f64, a_bar: f64, ph: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (a_bar - ph) / z
    }
}

/// Zero-order-hold discretization of one diagonal entry:
/// `ā = exp(Δa)`, `b̄ = ((exp(Δa) − 1)/(Δa))·Δ·b`.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {delta}")));
    }
    let z = delta * a;
    Ok((z.exp(), phi(z) * delta * b))
}
