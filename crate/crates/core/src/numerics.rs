//! Scalar special functions and numerically stable primitives.
//!
//! All routines are pure `f64` functions. Domain violations are reported as
//! [`Error::Domain`] rather than returning NaN.

use crate::{Error, Result};

/// Lanczos coefficients for g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
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

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_positive(func: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(func, format!("x = {x}, need finite x > 0")))
    }
}

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive("log_gamma", x)?;
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(mut x: f64) -> f64 {
    // Lanczos is accurate for x >= 0.5; shift smaller arguments up by one.
    let mut shift = 0.0;
    while x < 0.5 {
        shift -= x.ln();
        x += 1.0;
    }
    let xm1 = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (xm1 + i as f64);
    }
    let t = xm1 + LANCZOS_G + 0.5;
    HALF_LN_2PI + (xm1 + 0.5) * t.ln() - t + acc.ln() + shift
}

/// Digamma Ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Asymptotic series in 1/x² with Bernoulli-number coefficients.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Derivative of digamma by central difference.
///
/// The step is `1e-6` for `x >= 1` and shrinks proportionally below that so
/// the stencil never leaves the domain.
pub fn trigamma_fd(x: f64) -> Result<f64> {
    check_positive("trigamma_fd", x)?;
    let h = 1e-6 * x.min(1.0);
    Ok((digamma_unchecked(x + h) - digamma_unchecked(x - h)) / (2.0 * h))
}

/// Regularized lower incomplete gamma function P(a, x).
pub fn reg_incomplete_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::domain(
            "reg_incomplete_gamma",
            format!("a = {a}, need a > 0"),
        ));
    }
    if !(x >= 0.0) {
        return Err(Error::domain(
            "reg_incomplete_gamma",
            format!("x = {x}, need x >= 0"),
        ));
    }
    Ok(reg_incomplete_gamma_unchecked(a, x))
}

pub(crate) fn reg_incomplete_gamma_unchecked(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - log_gamma_unchecked(a);
    if x < a + 1.0 {
        (log_prefactor + lower_series(a, x).ln()).exp().min(1.0)
    } else {
        (1.0 - (log_prefactor + upper_continued_fraction(a, x).ln()).exp()).max(0.0)
    }
}

/// Upper regularized Q(a, x) from the continued fraction; accurate for
/// x ≥ a + 1 where 1 − P would cancel.
pub(crate) fn reg_upper_incomplete_gamma_cf(a: f64, x: f64) -> f64 {
    let log_prefactor = a * x.ln() - x - log_gamma_unchecked(a);
    (log_prefactor + upper_continued_fraction(a, x).ln()).exp()
}

const MAX_ITER: usize = 1_000_000;

/// Σ xⁿ / (a (a+1) … (a+n)), converging for x < a + 1.
fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * f64::EPSILON * 0.5 {
            break;
        }
    }
    sum
}

/// Modified Lentz evaluation of the continued fraction for Γ(a, x).
fn upper_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < f64::EPSILON {
            break;
        }
    }
    h
}

/// Log density of Gamma(shape `a`, rate 1) at `x > 0`.
pub fn gamma_log_pdf(a: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() - x - log_gamma_unchecked(a)
}

/// Inverse of `x ↦ P(a, x)`: the Gamma(a, 1) quantile at probability `p`.
pub fn inv_reg_incomplete_gamma(a: f64, p: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::domain(
            "inv_reg_incomplete_gamma",
            format!("a = {a}"),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(
            "inv_reg_incomplete_gamma",
            format!("p = {p}"),
        ));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    // Lower-tail roots beyond f64 range: clamp to the smallest normal.
    let log_guess = (p.ln() + log_gamma_unchecked(a + 1.0)) / a;
    if log_guess < f64::MIN_POSITIVE.ln() {
        return Ok(f64::MIN_POSITIVE);
    }
    // Bracket the root, then safeguarded Newton.
    let mut lo = 0.0_f64;
    let mut hi = a.max(1.0);
    while reg_incomplete_gamma_unchecked(a, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    // Small-x expansion P ≈ xᵃ / Γ(a+1) gives a good start in the lower tail.
    let guess = log_guess.exp();
    let mut x = if guess > lo && guess < hi {
        guess
    } else {
        0.5 * (lo + hi)
    };
    for _ in 0..500 {
        let f = reg_incomplete_gamma_unchecked(a, x) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = gamma_log_pdf(a, x).exp();
        let mut next = x - f / density;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs() || hi - lo <= f64::EPSILON * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Logistic sigmoid without overflow for any finite input.
pub fn stable_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// ln σ(t), exact in both tails.
pub fn log_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

/// ln(1 + eᵗ).
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidParam("softmax of an empty vector".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
