//! Special functions backing the plausibility calibration and the credit model:
//! log-gamma, regularized incomplete gamma and beta functions, the standard
//! normal CDF and quantile, and the χ², Fisher and Student-t distributions
//! built on top of them.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;
/// Smallest positive normal double, used by the modified Lentz algorithm.
const TINY: f64 = 1e-300;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn check_gamma_args(a: f64, x: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(
            "a",
            format!("shape must be positive and finite, got {a}"),
        ));
    }
    if !(x >= 0.0) {
        return Err(Error::invalid("x", format!("argument must be non-negative, got {x}")));
    }
    Ok(())
}

/// Series representation of P(a, x); converges quickly for x < a + 1.
fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// Continued fraction for Q(a, x) (modified Lentz); used for x ≥ a + 1.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma function P(a, x).
pub fn regularized_incomplete_gamma(a: f64, x: f64) -> Result<f64> {
    check_gamma_args(a, x)?;
    Ok(lower_gamma_unchecked(a, x))
}

/// Regularized upper incomplete gamma function Q(a, x) = 1 − P(a, x),
/// evaluated without cancellation in the upper tail.
pub fn regularized_incomplete_gamma_upper(a: f64, x: f64) -> Result<f64> {
    check_gamma_args(a, x)?;
    Ok(upper_gamma_unchecked(a, x))
}

fn lower_gamma_unchecked(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else if x < a + 1.0 {
        gamma_series(a, x).clamp(0.0, 1.0)
    } else {
        (1.0 - gamma_continued_fraction(a, x)).clamp(0.0, 1.0)
    }
}

fn upper_gamma_unchecked(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else if x < a + 1.0 {
        (1.0 - gamma_series(a, x)).clamp(0.0, 1.0)
    } else {
        gamma_continued_fraction(a, x).clamp(0.0, 1.0)
    }
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn check_beta_args(a: f64, b: f64, x: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid("a", format!("must be positive and finite, got {a}")));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::invalid("b", format!("must be positive and finite, got {b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid("x", format!("must lie in [0, 1], got {x}")));
    }
    Ok(())
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    check_beta_args(a, b, x)?;
    Ok(beta_unchecked(a, b, x))
}

/// Returns I_x(a, b) computed on whichever side of the symmetry
/// I_x(a, b) = 1 − I_{1−x}(b, a) converges fastest.
fn beta_unchecked(a: f64, b: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    let front = ln_front.exp();
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    };
    value.clamp(0.0, 1.0)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF Φ(x), via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Acklam's rational approximation for the lower half, p ≤ 0.5.
fn acklam_lower(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Lower-half quantile refined by Halley steps on Φ(x) − p.
fn quantile_lower(p: f64) -> f64 {
    let mut x = acklam_lower(p);
    for _ in 0..3 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        if !u.is_finite() {
            break;
        }
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Standard normal quantile Φ⁻¹(p) for p ∈ (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("must lie in (0, 1), got {p}")));
    }
    Ok(probit(p))
}

/// Φ⁻¹ extended to the closed interval: 0 ↦ −∞ and 1 ↦ +∞.
pub(crate) fn probit(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p <= 0.5 {
        quantile_lower(p)
    } else {
        -quantile_lower(1.0 - p)
    }
}

/// χ²_k CDF.
pub fn chi_squared_cdf(k: f64, x: f64) -> Result<f64> {
    regularized_incomplete_gamma(0.5 * k, 0.5 * x.max(0.0))
}

/// χ²_k survival function 1 − F(x).
pub fn chi_squared_sf(k: f64, x: f64) -> Result<f64> {
    regularized_incomplete_gamma_upper(0.5 * k, 0.5 * x.max(0.0))
}

fn check_dof(d1: f64, d2: f64) -> Result<()> {
    if !(d1 > 0.0 && d2 > 0.0 && d1.is_finite() && d2.is_finite()) {
        return Err(Error::invalid(
            "degrees of freedom",
            format!("must be positive and finite, got ({d1}, {d2})"),
        ));
    }
    Ok(())
}

/// CDF of the Fisher F(d1, d2) distribution.
pub fn fisher_cdf(d1: f64, d2: f64, x: f64) -> Result<f64> {
    check_dof(d1, d2)?;
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let z = d1 * x / (d1 * x + d2);
    Ok(beta_unchecked(0.5 * d1, 0.5 * d2, z))
}

/// Survival function of F(d1, d2), using I_{1−z}(d2/2, d1/2) to keep precision in the tail.
pub fn fisher_sf(d1: f64, d2: f64, x: f64) -> Result<f64> {
    check_dof(d1, d2)?;
    if x <= 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    let w = d2 / (d1 * x + d2);
    Ok(beta_unchecked(0.5 * d2, 0.5 * d1, w))
}

/// CDF of the univariate Student-t with `nu` degrees of freedom.
pub fn student_t_cdf(nu: f64, t: f64) -> Result<f64> {
    check_dof(nu, 1.0)?;
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let w = nu / (nu + t * t);
    let tail = 0.5 * beta_unchecked(0.5 * nu, 0.5, w);
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

/// Student-t quantile by bracketing and bisection on the CDF.
pub fn student_t_quantile(nu: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("must lie in (0, 1), got {p}")));
    }
    check_dof(nu, 1.0)?;
    if p == 0.5 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while student_t_cdf(nu, lo)? > p {
        lo *= 2.0;
    }
    while student_t_cdf(nu, hi)? < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(nu, mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * mid.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0_f64;
        for n in 1..20 {
            fact *= n as f64;
            let got = ln_gamma(n as f64 + 1.0);
            assert!((got - fact.ln()).abs() < 1e-12 * fact.ln().max(1.0), "n={n}");
        }
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn incomplete_gamma_exponential_cdf() {
        let v = regularized_incomplete_gamma(1.0, 1.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let q = regularized_incomplete_gamma_upper(1.0, 30.0).unwrap();
        assert!((q - (-30.0f64).exp()).abs() < 1e-25);
    }

    #[test]
    fn incomplete_beta_trivial_values() {
        assert!((regularized_incomplete_beta(1.0, 1.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((regularized_incomplete_beta(2.0, 2.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        // I_x(a, 1) = x^a
        assert!((regularized_incomplete_beta(3.5, 1.0, 0.7).unwrap() - 0.7f64.powf(3.5)).abs() < 1e-14);
    }

    #[test]
    fn domain_violations_are_errors() {
        assert!(regularized_incomplete_gamma(0.0, 1.0).is_err());
        assert!(regularized_incomplete_gamma(1.0, -1.0).is_err());
        assert!(regularized_incomplete_beta(1.0, 1.0, 1.5).is_err());
        assert!(regularized_incomplete_beta(-1.0, 1.0, 0.5).is_err());
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn normal_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        // Bisection on the CDF as an independent route to the 99.9% quantile.
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < 0.999 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = normal_quantile(0.999).unwrap();
        assert!((q - lo).abs() < 1e-10);
        assert!((q - 3.090_232_306_167_813).abs() < 1e-9);
        for x in [0.1, 1.0, 2.5, 7.0] {
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn normal_quantile_roundtrip() {
        for &p in &[1e-300, 1e-20, 1e-8, 0.001, 0.02, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-12] {
            let x = normal_quantile(p).unwrap();
            let back = normal_cdf(x);
            assert!((back - p).abs() < 1e-9, "p={p}");
            if p < 0.5 {
                assert!((back - p).abs() <= 1e-12 * p, "relative error at p={p}");
            }
        }
    }

    #[test]
    fn chi_squared_two_dof_is_exponential() {
        for m2 in [0.1, 1.0, 5.0, 9.21034, 20.0, 60.0] {
            let sf = chi_squared_sf(2.0, m2).unwrap();
            assert!((sf - (-0.5 * m2).exp()).abs() < 1e-14, "m2={m2}");
        }
    }

    #[test]
    fn student_t_quantile_inverts_cdf() {
        for nu in [1.0, 3.0, 6.0, 30.0] {
            for p in [0.01, 0.3, 0.9, 0.999] {
                let t = student_t_quantile(nu, p).unwrap();
                assert!((student_t_cdf(nu, t).unwrap() - p).abs() < 1e-12);
            }
        }
        // t with 1 dof is Cauchy: F(t) = 1/2 + atan(t)/π
        let t = student_t_quantile(1.0, 0.75).unwrap();
        assert!((t - 1.0).abs() < 1e-10);
    }
}
