//! Float helpers that `core` does not provide without `std`.

/// Rounds a nonnegative duration in nanoseconds to the nearest integer.
/// Negative and NaN inputs map to zero.
pub(crate) fn round_ns(x: f64) -> u64 {
    if x.is_nan() || x <= 0.0 {
        return 0;
    }
    let r = libm::round(x);
    if r >= u64::MAX as f64 {
        u64::MAX
    } else {
        r as u64
    }
}

pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}
