//! Univariate normal density, distribution and quantile functions.
//!
//! The distribution function goes through `erfc`, and a companion log-cdf
//! path keeps far lower tails finite (a sum of thousands of `log Φ` terms
//! must not underflow). The quantile is Wichura's AS241 rational
//! approximation with a log-space Newton polish in the extreme tail.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{domain, Result};
use crate::scalar::Real;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this standardized value `log Φ` switches to a continued fraction.
const LOG_CDF_TAIL: f64 = -37.0;

#[inline]
pub fn std_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
pub fn std_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

#[inline]
pub fn std_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `log Φ(z)`, finite for every finite `z`.
pub fn std_log_cdf(z: f64) -> f64 {
    if z > 0.0 {
        (-0.5 * libm::erfc(z * FRAC_1_SQRT_2)).ln_1p()
    } else if z > LOG_CDF_TAIL {
        (0.5 * libm::erfc(-z * FRAC_1_SQRT_2)).ln()
    } else if z.is_finite() {
        std_log_pdf(z) + mills_ratio(-z).ln()
    } else if z.is_nan() {
        f64::NAN
    } else {
        f64::NEG_INFINITY
    }
}

/// Mills ratio `Φ(-t)/φ(t)` for large positive `t`, by backward evaluation of
/// the Laplace continued fraction.
fn mills_ratio(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=60).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

/// Standard normal quantile `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn std_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        return q * central(0.180_625 - q * q);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let x = tail(r.ln());
    if q < 0.0 {
        x
    } else {
        -x
    }
}

/// Lower-tail quantile from a log-probability: returns `z` with
/// `log Φ(z) = log_p`, for any `log_p ≤ 0`.
pub fn std_quantile_log(log_p: f64) -> f64 {
    if log_p.is_nan() {
        return f64::NAN;
    }
    if log_p >= -2.590_267_165_445_1 {
        // p ≥ 0.075: the direct form is accurate.
        return std_quantile(log_p.exp());
    }
    tail(log_p)
}

fn central(r: f64) -> f64 {
    let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
        + 6.726_577_092_700_87e4)
        * r
        + 4.592_195_393_154_987e4)
        * r
        + 1.373_169_376_550_946e4)
        * r
        + 1.971_590_950_306_551_3e3)
        * r
        + 1.331_416_678_917_843_7e2)
        * r
        + 3.387_132_872_796_366_5;
    let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
        + 3.930_789_580_009_271e4)
        * r
        + 2.121_379_430_158_659_7e4)
        * r
        + 5.394_196_021_424_751e3)
        * r
        + 6.871_870_074_920_579e2)
        * r
        + 4.231_333_070_160_091e1)
        * r
        + 1.0;
    num / den
}

/// Lower-tail branch of AS241 for `log p < log 0.075`; result is negative.
fn tail(log_p: f64) -> f64 {
    let r = (-log_p).sqrt();
    if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        return -num / den;
    }
    let x = if r <= 27.0 {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        return -num / den;
    } else {
        // Beyond the fitted range: asymptotic start, then Newton on log Φ.
        let s = -2.0 * log_p;
        -(s - (2.0 * PI * s).ln()).sqrt()
    };
    let mut x = x;
    for _ in 0..8 {
        let step = (std_log_cdf(x) - log_p) * (std_log_cdf(x) - std_log_pdf(x)).exp();
        x -= step;
        if step.abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    x
}

/// Draws `z ≤ b` from the standard normal truncated to `(-∞, b]` by
/// inversion of the uniform `u`. Returns `(z, log Φ(b))`.
pub fn truncated_upper_draw(b: f64, u: f64) -> (f64, f64) {
    let log_norm = std_log_cdf(b);
    let log_p = u.ln() + log_norm;
    let z = if log_p < -std::f64::consts::LN_2 {
        std_quantile_log(log_p)
    } else {
        // Upper-tail complement keeps precision when u·Φ(b) is close to 1.
        let q = (1.0 - u) + u * std_cdf(-b);
        -std_quantile(q)
    };
    (z.min(b), log_norm)
}

fn check_var<T: Real>(var: T) -> Result<()> {
    if !(var > T::zero()) || !var.is_finite() {
        return domain(format!("normal variance must be positive and finite, got {var}"));
    }
    Ok(())
}

/// Density and distribution function of `N(mean, var)` at `x`.
pub fn norm_pdf_cdf<T: Real>(x: T, mean: T, var: T) -> Result<(T, T)> {
    check_var(var)?;
    let sd = var.f64().sqrt();
    let z = (x - mean).f64() / sd;
    Ok((T::lit(std_pdf(z) / sd), T::lit(std_cdf(z))))
}

/// `log Φ((x - mean)/sqrt(var))`.
pub fn norm_log_cdf<T: Real>(x: T, mean: T, var: T) -> Result<T> {
    check_var(var)?;
    Ok(T::lit(std_log_cdf((x - mean).f64() / var.f64().sqrt())))
}

/// `log φ(x; mean, var)`.
pub fn norm_log_pdf<T: Real>(x: T, mean: T, var: T) -> Result<T> {
    check_var(var)?;
    let v = var.f64();
    let z = (x - mean).f64() / v.sqrt();
    Ok(T::lit(std_log_pdf(z) - 0.5 * v.ln()))
}
