//! Marginal laws of the per-type frailty: unit-mean gamma frailties and
//! zero-mean Gaussian random effects `b = log w`.
//!
//! Each marginal works on its natural scale (`w` for gamma, `b` for
//! Gaussian). The `*_log_scale` methods express both on `b = log w`, which is
//! the coordinate the posterior sampler moves in.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::special::{
    digamma, gamma_log_quantile_tails, gamma_pq, gamma_quantile, ln_gamma, std_normal_cdf, std_normal_quantile,
    std_normal_quantile_tails, std_normal_sf, trigamma, LN_SQRT_2PI,
};

pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 1e4;
const Q4_GRAD_TOL: f64 = 1e-8;
const Q4_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarginalFamily {
    Gamma,
    Gaussian,
}

/// Gamma frailty with mean 1 and variance `alpha` (shape `1/alpha`, scale `alpha`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaMarginal {
    alpha: f64,
    shape: f64,
    ln_norm: f64,
    ln_gamma_shape: f64,
}

impl GammaMarginal {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::domain(format!("gamma variance must be positive, got {alpha}")));
        }
        let shape = 1.0 / alpha;
        let ln_gamma_shape = ln_gamma(shape);
        Ok(GammaMarginal { alpha, shape, ln_norm: ln_gamma_shape + shape * alpha.ln(), ln_gamma_shape })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.alpha
    }

    pub fn log_pdf(&self, w: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::domain(format!("gamma frailty must be positive, got {w}")));
        }
        Ok(self.ln_pdf_log_scale(w.ln()) - w.ln())
    }

    pub fn cdf(&self, w: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::domain(format!("gamma frailty must be positive, got {w}")));
        }
        Ok(gamma_pq(self.shape, w / self.alpha, self.ln_gamma_shape).0)
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        check_unit(u)?;
        Ok(self.alpha * gamma_quantile(self.shape, u, self.ln_gamma_shape))
    }

    /// Density of `b = log w`.
    #[inline]
    pub fn ln_pdf_log_scale(&self, b: f64) -> f64 {
        self.shape * b - b.exp() / self.alpha - self.ln_norm
    }

    /// `(F, 1 - F)` at `w = exp(b)`.
    #[inline]
    pub fn cdf_tails_log_scale(&self, b: f64) -> (f64, f64) {
        gamma_pq(self.shape, b.exp() / self.alpha, self.ln_gamma_shape)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, self.alpha).expect("valid gamma").sample(rng)
    }
}

/// Gaussian random effect `b ~ N(0, alpha)`; the frailty is `w = exp(b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMarginal {
    alpha: f64,
    sd: f64,
}

impl GaussianMarginal {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::domain(format!("random-effect variance must be positive, got {alpha}")));
        }
        Ok(GaussianMarginal { alpha, sd: alpha.sqrt() })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `E(w) = exp(alpha / 2)` for the implied lognormal frailty.
    pub fn frailty_mean(&self) -> f64 {
        (self.alpha / 2.0).exp()
    }

    /// `Var(w) = exp(alpha) (exp(alpha) - 1)`.
    pub fn frailty_variance(&self) -> f64 {
        self.alpha.exp() * self.alpha.exp_m1()
    }

    pub fn log_pdf(&self, b: f64) -> Result<f64> {
        if !b.is_finite() {
            return Err(Error::domain(format!("random effect must be finite, got {b}")));
        }
        Ok(self.ln_pdf_log_scale(b))
    }

    pub fn cdf(&self, b: f64) -> Result<f64> {
        if b.is_nan() {
            return Err(Error::domain("random effect is NaN"));
        }
        Ok(std_normal_cdf(b / self.sd))
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        check_unit(u)?;
        Ok(self.sd * std_normal_quantile(u))
    }

    #[inline]
    pub fn ln_pdf_log_scale(&self, b: f64) -> f64 {
        let z = b / self.sd;
        -0.5 * z * z - LN_SQRT_2PI - self.sd.ln()
    }

    #[inline]
    pub fn cdf_tails_log_scale(&self, b: f64) -> (f64, f64) {
        let z = b / self.sd;
        (std_normal_cdf(z), std_normal_sf(z))
    }

    /// Standardized score `b / sd`, exact even where `Φ` rounds to 0 or 1.
    #[inline]
    pub fn standardize(&self, b: f64) -> f64 {
        b / self.sd
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Normal::new(0.0, self.sd).expect("valid normal").sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Gamma(GammaMarginal),
    Gaussian(GaussianMarginal),
}

impl Marginal {
    pub fn new(family: MarginalFamily, alpha: f64) -> Result<Self> {
        Ok(match family {
            MarginalFamily::Gamma => Marginal::Gamma(GammaMarginal::new(alpha)?),
            MarginalFamily::Gaussian => Marginal::Gaussian(GaussianMarginal::new(alpha)?),
        })
    }

    pub fn family(&self) -> MarginalFamily {
        match self {
            Marginal::Gamma(_) => MarginalFamily::Gamma,
            Marginal::Gaussian(_) => MarginalFamily::Gaussian,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Marginal::Gamma(g) => g.alpha(),
            Marginal::Gaussian(g) => g.alpha(),
        }
    }

    /// Log density on the natural scale (`w` for gamma, `b` for Gaussian).
    pub fn log_pdf(&self, x: f64) -> Result<f64> {
        match self {
            Marginal::Gamma(g) => g.log_pdf(x),
            Marginal::Gaussian(g) => g.log_pdf(x),
        }
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        match self {
            Marginal::Gamma(g) => g.cdf(x),
            Marginal::Gaussian(g) => g.cdf(x),
        }
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        match self {
            Marginal::Gamma(g) => g.quantile(u),
            Marginal::Gaussian(g) => g.quantile(u),
        }
    }

    #[inline]
    pub fn ln_pdf_log_scale(&self, b: f64) -> f64 {
        match self {
            Marginal::Gamma(g) => g.ln_pdf_log_scale(b),
            Marginal::Gaussian(g) => g.ln_pdf_log_scale(b),
        }
    }

    #[inline]
    pub fn cdf_tails_log_scale(&self, b: f64) -> (f64, f64) {
        match self {
            Marginal::Gamma(g) => g.cdf_tails_log_scale(b),
            Marginal::Gaussian(g) => g.cdf_tails_log_scale(b),
        }
    }

    /// Maps a copula uniform to the log-frailty `b`.
    pub fn log_scale_quantile(&self, u: f64) -> Result<f64> {
        check_unit(u)?;
        Ok(self.log_scale_quantile_tails(u, 1.0 - u))
    }

    /// As [`Marginal::log_scale_quantile`], given `(u, 1 - u)` separately so
    /// the upper tail keeps its precision.
    pub fn log_scale_quantile_tails(&self, lower: f64, upper: f64) -> f64 {
        match self {
            Marginal::Gamma(g) => g.alpha.ln() + gamma_log_quantile_tails(g.shape, lower, upper, g.ln_gamma_shape),
            Marginal::Gaussian(g) => g.sd * std_normal_quantile_tails(lower, upper),
        }
    }
}

fn check_unit(u: f64) -> Result<()> {
    if u > 0.0 && u < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("probability must lie in (0, 1), got {u}")))
    }
}

/// Expected gamma log-likelihood `Q4(alpha_j)` from per-subject `E[log w]`
/// and `E[w]`.
pub fn q4_gamma(alpha: f64, e_log_w: &[f64], e_w: &[f64]) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    if e_log_w.len() != e_w.len() {
        return Err(Error::domain("E[log w] and E[w] lengths differ"));
    }
    let s = 1.0 / alpha;
    let n = e_w.len() as f64;
    let data: f64 = e_log_w.iter().zip(e_w).map(|(l, w)| (s - 1.0) * l - s * w).sum();
    Ok(data - n * (ln_gamma(s) + s * alpha.ln()))
}

/// Expected Gaussian random-effect log-likelihood from per-subject `E[b²]`.
pub fn q4_gaussian(alpha: f64, e_b2: &[f64]) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    let n = e_b2.len() as f64;
    let ss: f64 = e_b2.iter().sum();
    Ok(-ss / (2.0 * alpha) - n * (LN_SQRT_2PI + 0.5 * alpha.ln()))
}

/// Per-subject E-step summaries for one event type.
#[derive(Debug, Clone, Copy)]
pub struct MarginStats<'a> {
    pub e_w: &'a [f64],
    pub e_log_w: &'a [f64],
    pub e_b2: &'a [f64],
}

/// Maximizer of `Q4` on `(0, ∞)`.
///
/// Gaussian margins use the closed form `mean(E[b²])`. Gamma margins solve
/// the score equation by Newton on `log alpha` inside the bracket
/// `[ALPHA_MIN, ALPHA_MAX]`, falling back to bisection when a step leaves it.
pub fn maximize_q4(family: MarginalFamily, stats: MarginStats<'_>) -> Result<f64> {
    match family {
        MarginalFamily::Gaussian => {
            let n = stats.e_b2.len();
            if n == 0 {
                return Err(Error::domain("no subjects"));
            }
            let a = stats.e_b2.iter().sum::<f64>() / n as f64;
            Ok(a.clamp(ALPHA_MIN, ALPHA_MAX))
        }
        MarginalFamily::Gamma => maximize_q4_gamma(stats.e_log_w, stats.e_w),
    }
}

fn maximize_q4_gamma(e_log_w: &[f64], e_w: &[f64]) -> Result<f64> {
    let n = e_w.len();
    if n == 0 || e_log_w.len() != n {
        return Err(Error::domain("mismatched or empty E-step summaries"));
    }
    // With s = 1/alpha the per-subject score is c - (ψ(s) - ln s), where
    // c = mean(E log w - E w) + 1; ψ(s) - ln s increases from -∞ to 0.
    let c = e_log_w.iter().zip(e_w).map(|(l, w)| l - w).sum::<f64>() / n as f64 + 1.0;
    let score_s = |s: f64| c - (digamma(s) - s.ln());
    // gradient in theta = log alpha is -s * score_s
    let grad_theta = |theta: f64| {
        let s = (-theta).exp();
        -s * score_s(s)
    };
    let (mut lo, mut hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    // grad_theta is decreasing in theta at the optimum's neighbourhood: positive
    // below, negative above.
    if grad_theta(hi) >= 0.0 {
        return Ok(ALPHA_MAX);
    }
    if grad_theta(lo) <= 0.0 {
        return Ok(ALPHA_MIN);
    }
    let mut theta = 0.0_f64.clamp(lo, hi);
    for _ in 0..Q4_MAX_ITER {
        let g = grad_theta(theta);
        if g.abs() < Q4_GRAD_TOL {
            return Ok(theta.exp());
        }
        if g > 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let s = (-theta).exp();
        // d/dθ of (-s * score_s(s)) with ds/dθ = -s
        let h = s * score_s(s) + s * s * (1.0 / s - trigamma(s));
        let mut next = theta - g / h;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (hi - lo) < 1e-14 {
            return Ok(next.exp());
        }
        theta = next;
    }
    Err(Error::Optimization { iterations: Q4_MAX_ITER, last: theta.exp() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_gamma_is_exponential() {
        let g = GammaMarginal::new(1.0).unwrap();
        assert_relative_eq!(g.log_pdf(1.0).unwrap(), -1.0, epsilon = 1e-14);
        assert_relative_eq!(g.cdf(std::f64::consts::LN_2).unwrap(), 0.5, epsilon = 1e-14);
        assert_relative_eq!(g.quantile(0.5).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_mode_and_median() {
        let g = GaussianMarginal::new(1.0).unwrap();
        assert_relative_eq!(g.log_pdf(0.0).unwrap(), -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        assert_eq!(GaussianMarginal::new(4.0).unwrap().cdf(0.0).unwrap(), 0.5);
        assert_relative_eq!(g.quantile(0.975).unwrap(), 1.959964, epsilon = 1e-6);
    }

    #[test]
    fn gamma_log_pdf_matches_direct_formula() {
        // w^{1/α-1} e^{-w/α} / (Γ(1/α) α^{1/α}) at α = 0.5, w = 2: Γ(2) = 1
        let direct = (2.0_f64.powf(1.0) * (-4.0_f64).exp() / (1.0 * 0.5_f64.powf(2.0))).ln();
        assert_relative_eq!(GammaMarginal::new(0.5).unwrap().log_pdf(2.0).unwrap(), direct, epsilon = 1e-13);
    }

    #[test]
    fn domain_errors() {
        let g = Marginal::new(MarginalFamily::Gamma, 1.0).unwrap();
        assert!(g.log_pdf(0.0).is_err());
        assert!(g.cdf(-1.0).is_err());
        assert!(g.quantile(1.0).is_err());
        assert!(g.quantile(0.0).is_err());
        assert!(Marginal::new(MarginalFamily::Gaussian, 0.0).is_err());
        assert!(q4_gamma(0.0, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn quantile_cdf_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for alpha in [0.25, 1.0, 4.0] {
            for fam in [MarginalFamily::Gamma, MarginalFamily::Gaussian] {
                let m = Marginal::new(fam, alpha).unwrap();
                for _ in 0..100 {
                    let x = match fam {
                        MarginalFamily::Gamma => rng.random_range(0.01..5.0),
                        MarginalFamily::Gaussian => rng.random_range(-4.0..4.0) * alpha.sqrt(),
                    };
                    let back = m.quantile(m.cdf(x).unwrap()).unwrap();
                    assert!((back - x).abs() < 1e-10 * x.abs().max(1.0), "{fam:?} {alpha} {x} {back}");
                }
            }
        }
    }

    #[test]
    fn quantile_strictly_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for fam in [MarginalFamily::Gamma, MarginalFamily::Gaussian] {
            let m = Marginal::new(fam, 0.7).unwrap();
            for _ in 0..200 {
                let a: f64 = rng.random_range(1e-6..1.0 - 1e-6);
                let b: f64 = rng.random_range(1e-6..1.0 - 1e-6);
                if a == b {
                    continue;
                }
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                assert!(m.quantile(lo).unwrap() < m.quantile(hi).unwrap());
            }
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        for alpha in [0.25, 1.0, 4.0] {
            // integrate over b = log w so the gamma mass near 0 is resolved
            let g = GammaMarginal::new(alpha).unwrap();
            let total = simpson(|b| g.ln_pdf_log_scale(b).exp(), -200.0, 6.0, 200_000);
            assert!((total - 1.0).abs() < 1e-6, "gamma {alpha}: {total}");
            let n = GaussianMarginal::new(alpha).unwrap();
            let sd = alpha.sqrt();
            let total = simpson(|b| n.log_pdf(b).unwrap().exp(), -12.0 * sd, 12.0 * sd, 20_000);
            assert!((total - 1.0).abs() < 1e-6, "gaussian {alpha}: {total}");
        }
    }

    #[test]
    fn q4_plug_in_values() {
        assert_relative_eq!(q4_gamma(1.0, &[0.0], &[1.0]).unwrap(), -1.0, epsilon = 1e-14);
        let el = [0.3, -1.2, 0.05];
        let ew = [1.7, 0.4, 1.1];
        assert_relative_eq!(q4_gamma(1.0, &el, &ew).unwrap(), -(1.7 + 0.4 + 1.1), epsilon = 1e-13);
    }

    #[test]
    fn q4_is_mc_average_of_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = GammaMarginal::new(0.8).unwrap();
        let n = 5;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| (0..50).map(|_| truth.sample(&mut rng)).collect()).collect();
        let e_w: Vec<f64> = draws.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
        let e_l: Vec<f64> = draws.iter().map(|d| d.iter().map(|w| w.ln()).sum::<f64>() / d.len() as f64).collect();
        for alpha in [0.3, 1.0, 2.5] {
            let g = GammaMarginal::new(alpha).unwrap();
            let direct: f64 =
                draws.iter().map(|d| d.iter().map(|&w| g.log_pdf(w).unwrap()).sum::<f64>() / d.len() as f64).sum();
            assert_relative_eq!(q4_gamma(alpha, &e_l, &e_w).unwrap(), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn q4_concave_in_inverse_alpha() {
        let el = [-0.6, -0.2, 0.1, -1.4];
        let ew = [0.8, 1.1, 1.3, 0.5];
        let q: Vec<f64> = (1..200).map(|k| q4_gamma(1.0 / (0.05 * k as f64), &el, &ew).unwrap()).collect();
        for w in q.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] <= 1e-9);
        }
    }

    #[test]
    fn gaussian_q4_closed_form() {
        let e_b2 = vec![2.0; 10];
        let a = maximize_q4(MarginalFamily::Gaussian, MarginStats { e_w: &[], e_log_w: &[], e_b2: &e_b2 }).unwrap();
        assert_relative_eq!(a, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_q4_maximizer_matches_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for truth in [0.3, 1.0, 3.0] {
            let g = GammaMarginal::new(truth).unwrap();
            let n = 200;
            let mut e_w = Vec::new();
            let mut e_l = Vec::new();
            for _ in 0..n {
                let d: Vec<f64> = (0..20).map(|_| g.sample(&mut rng)).collect();
                e_w.push(d.iter().sum::<f64>() / 20.0);
                e_l.push(d.iter().map(|w| w.ln()).sum::<f64>() / 20.0);
            }
            let hat = maximize_q4(MarginalFamily::Gamma, MarginStats { e_w: &e_w, e_log_w: &e_l, e_b2: &[] }).unwrap();
            // coarse log grid over [0.01, 20], then a fine linear grid
            let grid = |lo: f64, hi: f64, k: usize| {
                (0..=k)
                    .map(|i| lo + (hi - lo) * i as f64 / k as f64)
                    .max_by(|a, b| q4_gamma(*a, &e_l, &e_w).unwrap().total_cmp(&q4_gamma(*b, &e_l, &e_w).unwrap()))
                    .unwrap()
            };
            let coarse = grid(0.01, 20.0, 20_000);
            let fine = grid(coarse - 1e-3, coarse + 1e-3, 20_000);
            assert!((hat - fine).abs() < 1e-4, "truth {truth}: newton {hat} grid {fine}");
        }
    }

    #[test]
    fn gamma_q4_recovers_truth_with_exact_frailties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = GammaMarginal::new(1.0).unwrap();
        let w: Vec<f64> = (0..200).map(|_| g.sample(&mut rng)).collect();
        let l: Vec<f64> = w.iter().map(|x| x.ln()).collect();
        let hat = maximize_q4(MarginalFamily::Gamma, MarginStats { e_w: &w, e_log_w: &l, e_b2: &[] }).unwrap();
        // sampling spread of the estimator at n = 200 is about 0.1-0.3
        assert!((hat - 1.0).abs() < 0.35, "{hat}");
    }

    #[test]
    fn degenerate_summaries_hit_bracket() {
        let ones = vec![1.0; 10];
        let zeros = vec![0.0; 10];
        let hat = maximize_q4(MarginalFamily::Gamma, MarginStats { e_w: &ones, e_log_w: &zeros, e_b2: &[] }).unwrap();
        assert_eq!(hat, ALPHA_MIN);
    }

    #[test]
    fn moments_by_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        for alpha in [0.5, 1.0] {
            let g = GammaMarginal::new(alpha).unwrap();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let w = g.sample(&mut rng);
                s += w;
                s2 += w * w;
            }
            let mean = s / n as f64;
            let var = s2 / n as f64 - mean * mean;
            assert!((mean - 1.0).abs() < 0.01, "{mean}");
            assert!((var / alpha - 1.0).abs() < 0.01, "{var}");
        }
        let g = GaussianMarginal::new(0.5).unwrap();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let w = g.sample(&mut rng).exp();
            s += w;
            s2 += w * w;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean / g.frailty_mean() - 1.0).abs() < 0.01);
        assert!((var / g.frailty_variance() - 1.0).abs() < 0.01);
    }
}
