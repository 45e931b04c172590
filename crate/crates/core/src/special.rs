//! Special functions not covered by `statrs` in the form the samplers need:
//! complementary incomplete-gamma pairs with a cached `ln Γ(a)`, trigamma,
//! and tail-accurate normal quantiles.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 1000;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation for large `x`.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

pub fn std_normal_ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn std_normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    std_normal_quantile_tails(p, 1.0 - p)
}

/// Φ⁻¹ given both tails, using whichever is less affected by rounding.
pub fn std_normal_quantile_tails(lower: f64, upper: f64) -> f64 {
    // one Halley step on the smaller tail polishes erfc_inv's last digits
    if lower <= upper {
        let z = -SQRT_2 * erfc_inv(2.0 * lower);
        halley_step(z, std_normal_cdf(z) - lower)
    } else {
        let z = SQRT_2 * erfc_inv(2.0 * upper);
        halley_step(z, upper - std_normal_sf(z))
    }
}

#[inline]
fn halley_step(z: f64, resid: f64) -> f64 {
    let dens = std_normal_ln_pdf(z).exp();
    if !(dens > 0.0) || !z.is_finite() {
        return z;
    }
    let t = resid / dens;
    z - t / (1.0 + 0.5 * z * t)
}

/// Regularized incomplete gamma functions `(P(a, x), Q(a, x))`.
///
/// `ln_gamma_a` must equal `ln Γ(a)`; callers evaluating many points at the
/// same shape cache it.
pub fn gamma_pq(a: f64, x: f64, ln_gamma_a: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 1.0);
    }
    if x.is_infinite() {
        return (1.0, 0.0);
    }
    let ln_prefix = a * x.ln() - x - ln_gamma_a;
    if x < a + 1.0 {
        // series for P
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        let p = (sum.ln() + ln_prefix).exp();
        let p = p.min(1.0);
        (p, 1.0 - p)
    } else {
        // modified Lentz continued fraction for Q
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        let q = (h.ln() + ln_prefix).exp();
        let q = q.min(1.0);
        (1.0 - q, q)
    }
}

/// Trigamma ψ'(x) for x > 0 via recurrence and the asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0 - x2 * 5.0 / 66.0))))
}

/// Log of the unit-scale gamma(a) quantile, finite even where the quantile
/// itself underflows (small shape, small lower tail).
pub fn gamma_log_quantile_tails(a: f64, p: f64, q: f64, ln_gamma_a: f64) -> f64 {
    if p < q {
        // P(a, x) = x^a / Γ(a + 1) · (1 + O(x)) as x → 0
        let ln_x0 = (p.ln() + ln_gamma(a + 1.0)) / a;
        if ln_x0 < -30.0 {
            return ln_x0;
        }
    }
    gamma_quantile_tails(a, p, q, ln_gamma_a).ln()
}

/// Quantile of the unit-scale gamma(a) law.
pub fn gamma_quantile(a: f64, p: f64, ln_gamma_a: f64) -> f64 {
    gamma_quantile_tails(a, p, 1.0 - p, ln_gamma_a)
}

/// Gamma(a) quantile given both tail probabilities `p` and `q = 1 - p`; the
/// smaller one drives the iteration so upper quantiles keep full precision.
pub fn gamma_quantile_tails(a: f64, p: f64, q: f64, ln_gamma_a: f64) -> f64 {
    debug_assert!(p > 0.0 && q > 0.0 && a > 0.0);
    let upper = q < p;
    // Wilson–Hilferty start, then safeguarded Newton on the smaller tail
    let z = std_normal_quantile_tails(p, q);
    let c = 1.0 / (9.0 * a);
    let mut x = a * (1.0 - c + z * c.sqrt()).powi(3);
    if !(x > 0.0) || !x.is_finite() {
        // small-x tail: P(a, x) ≈ x^a / Γ(a + 1)
        x = ((p.ln() + ln_gamma(a + 1.0)) / a).exp();
    }
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..300 {
        let (pl, pu) = gamma_pq(a, x, ln_gamma_a);
        // resid > 0 means x is too large
        let resid = if upper { q - pu } else { pl - p };
        if resid > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let dens = ((a - 1.0) * x.ln() - x - ln_gamma_a).exp();
        let mut next = if dens > 0.0 && dens.is_finite() { x - resid / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(lo) + 1.0 };
        }
        if (next - x).abs() <= 1e-15 * x.abs() || next == 0.0 {
            return next;
        }
        x = next;
    }
    x
}

pub fn two_sided_normal_p(z: f64) -> f64 {
    (2.0 * std_normal_sf(z.abs())).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn incomplete_gamma_matches_exponential() {
        for &x in &[1e-6, 0.1, 0.693, 1.0, 5.0, 40.0] {
            let (p, q) = gamma_pq(1.0, x, 0.0);
            assert_relative_eq!(q, (-x).exp(), max_relative = 1e-13);
            assert_relative_eq!(p, -(-x).exp_m1(), max_relative = 1e-12);
        }
    }

    #[test]
    fn incomplete_gamma_agrees_with_statrs() {
        for &a in &[0.125, 0.5, 1.0, 2.0, 4.0, 25.0] {
            for &x in &[0.01, 0.3, 1.0, 2.5, 7.0, 30.0] {
                let (p, _) = gamma_pq(a, x, ln_gamma(a));
                let reference = statrs::function::gamma::gamma_lr(a, x);
                assert!((p - reference).abs() < 1e-12, "a={a} x={x} p={p} ref={reference}");
            }
        }
    }

    #[test]
    fn trigamma_known_values() {
        assert_relative_eq!(trigamma(1.0), PI * PI / 6.0, max_relative = 1e-12);
        assert_relative_eq!(trigamma(0.5), PI * PI / 2.0, max_relative = 1e-12);
        // recurrence ψ'(x) = ψ'(x+1) + 1/x²
        assert_relative_eq!(trigamma(3.3), trigamma(4.3) + 1.0 / (3.3 * 3.3), max_relative = 1e-12);
    }

    #[test]
    fn gamma_quantile_inverts_cdf() {
        for &a in &[0.02, 0.25, 1.0, 3.0, 50.0] {
            let lg = ln_gamma(a);
            for &p in &[1e-10, 1e-4, 0.1, 0.5, 0.9, 0.9999, 1.0 - 1e-9] {
                let ln_x = gamma_log_quantile_tails(a, p, 1.0 - p, lg);
                if ln_x < -700.0 {
                    // quantile underflows; check the leading-order tail instead
                    let ln_p = a * ln_x - ln_gamma(a + 1.0);
                    assert!((ln_p - p.ln()).abs() < 1e-10);
                    continue;
                }
                let x = gamma_quantile(a, p, lg);
                assert_relative_eq!(ln_x, x.ln(), max_relative = 1e-9);
                let (pl, pu) = gamma_pq(a, x, lg);
                let err = if p < 0.5 { (pl - p).abs() / p } else { (pu - (1.0 - p)).abs() / (1.0 - p) };
                assert!(err < 1e-8, "a={a} p={p} x={x} err={err}");
            }
        }
    }

    #[test]
    fn normal_quantile_tails() {
        assert_relative_eq!(std_normal_quantile(0.975), 1.959_963_984_540_054, max_relative = 1e-12);
        let z = std_normal_quantile_tails(1.0 - 1e-14, 1e-14);
        assert_relative_eq!(z, -std_normal_quantile(1e-14), max_relative = 1e-10);
    }
}
