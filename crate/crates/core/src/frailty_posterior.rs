//! Conditional distribution of a subject's frailty vector given its data, and
//! the random-walk Metropolis–Hastings sampler that draws from it.
//!
//! The sampler always moves in `b = log w`. For gamma margins the target on
//! that scale carries the Jacobian `Π w_j`, which the `*_log_scale` marginal
//! densities already include.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::copulas::{clayton_log_density_ln_u, ln_uniform, normal_score, Copula, CopulaFamily, SCORE_CLAMP_U};
use crate::error::{Error, Result};
use crate::marginals::{Marginal, MarginalFamily};
use crate::parallel::{self, Execution};

/// Largest number of event types handled without heap allocation in the
/// sampler's inner loop.
pub const MAX_TYPES: usize = 16;

const ADAPT_BATCH: usize = 50;
const STEP_MIN: f64 = 1e-4;
const STEP_MAX: f64 = 20.0;
const ACCEPTANCE_WARN_LOW: f64 = 0.05;
const ACCEPTANCE_WARN_HIGH: f64 = 0.95;

/// Nodes per tabulated margin.
const TABLE_NODES: usize = 2048;
/// Tail mass left outside a Clayton table; beyond it the exact map is used.
const TABLE_TAIL: f64 = 1e-14;

/// Cubic Hermite interpolant of a smooth scalar map on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
struct HermiteTable {
    lo: f64,
    hi: f64,
    inv_h: f64,
    values: Vec<f64>,
    /// Derivatives scaled by the grid step.
    slopes: Vec<f64>,
}

impl HermiteTable {
    fn build(lo: f64, hi: f64, f: impl Fn(f64) -> (f64, f64)) -> Self {
        let n = TABLE_NODES;
        let h = (hi - lo) / (n - 1) as f64;
        let (values, slopes) = (0..n).map(|k| f(lo + k as f64 * h)).map(|(v, d)| (v, d * h)).unzip();
        HermiteTable { lo, hi, inv_h: 1.0 / h, values, slopes }
    }

    #[inline]
    fn eval(&self, x: f64) -> f64 {
        let t = (x - self.lo) * self.inv_h;
        let k = (t as usize).min(self.values.len() - 2);
        let s = t - k as f64;
        let (y0, y1, d0, d1) = (self.values[k], self.values[k + 1], self.slopes[k], self.slopes[k + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * d1
    }
}

/// How one margin's `b` becomes the copula's coordinate: `ln u` for
/// Clayton, the clamped normal score for the Gaussian copula.
#[derive(Debug, Clone, PartialEq)]
enum CopulaCoordinate {
    Unused,
    LnU(HermiteTable),
    Score { table: Option<HermiteTable>, lo: f64, hi: f64, clamp: f64 },
}

impl CopulaCoordinate {
    fn build(margin: &Marginal, copula: &Copula) -> Self {
        let deriv = |b: f64| margin.ln_pdf_log_scale(b).exp();
        match copula {
            Copula::Clayton { param, .. } if param.is_independence() => CopulaCoordinate::Unused,
            Copula::Clayton { .. } => {
                let lo = margin.log_scale_quantile_tails(TABLE_TAIL, 1.0 - TABLE_TAIL);
                let hi = margin.log_scale_quantile_tails(1.0 - TABLE_TAIL, TABLE_TAIL);
                CopulaCoordinate::LnU(HermiteTable::build(lo, hi, |b| {
                    let (l, u) = margin.cdf_tails_log_scale(b);
                    (ln_uniform(l, u), deriv(b) / l)
                }))
            }
            Copula::Gaussian(_) => {
                let lo = margin.log_scale_quantile_tails(SCORE_CLAMP_U, 1.0 - SCORE_CLAMP_U);
                let hi = margin.log_scale_quantile_tails(1.0 - SCORE_CLAMP_U, SCORE_CLAMP_U);
                let clamp = normal_score(1.0 - SCORE_CLAMP_U, SCORE_CLAMP_U);
                let table = match margin {
                    Marginal::Gaussian(_) => None,
                    Marginal::Gamma(_) => Some(HermiteTable::build(lo, hi, |b| {
                        let (l, u) = margin.cdf_tails_log_scale(b);
                        let z = normal_score(l, u);
                        (z, deriv(b) / (-0.5 * z * z).exp() * (2.0 * std::f64::consts::PI).sqrt())
                    })),
                };
                CopulaCoordinate::Score { table, lo, hi, clamp }
            }
        }
    }

    #[inline]
    fn eval(&self, margin: &Marginal, b: f64) -> f64 {
        match self {
            CopulaCoordinate::Unused => 0.0,
            CopulaCoordinate::LnU(t) => {
                if b >= t.lo && b <= t.hi {
                    t.eval(b)
                } else {
                    let (l, u) = margin.cdf_tails_log_scale(b);
                    ln_uniform(l, u)
                }
            }
            CopulaCoordinate::Score { table, lo, hi, clamp } => {
                if b <= *lo {
                    -clamp
                } else if b >= *hi {
                    *clamp
                } else {
                    match (table, margin) {
                        (Some(t), _) => t.eval(b),
                        (None, Marginal::Gaussian(g)) => g.standardize(b),
                        (None, _) => {
                            let (l, u) = margin.cdf_tails_log_scale(b);
                            normal_score(l, u)
                        }
                    }
                }
            }
        }
    }
}

/// Joint frailty law: per-type margins glued by a copula.
///
/// The maps from `b` to the copula's coordinates are tabulated at
/// construction (cubic Hermite, absolute error below 1e-9), which keeps
/// incomplete-gamma evaluations out of the sampler's inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFrailty {
    margins: Vec<Marginal>,
    copula: Copula,
    coords: Vec<CopulaCoordinate>,
}

impl JointFrailty {
    pub fn new(margins: Vec<Marginal>, copula: Copula) -> Result<Self> {
        let m = margins.len();
        if m == 0 || m > MAX_TYPES {
            return Err(Error::domain(format!("number of event types must be in 1..={MAX_TYPES}, got {m}")));
        }
        if copula.dim() != m {
            return Err(Error::domain(format!("copula dimension {} does not match {m} margins", copula.dim())));
        }
        if margins.iter().any(|g| g.family() != margins[0].family()) {
            return Err(Error::domain("all margins must belong to the same family"));
        }
        let coords = margins.iter().map(|g| CopulaCoordinate::build(g, &copula)).collect();
        Ok(JointFrailty { margins, copula, coords })
    }

    pub fn independent(family: MarginalFamily, copula: CopulaFamily, alphas: &[f64]) -> Result<Self> {
        let margins = alphas.iter().map(|&a| Marginal::new(family, a)).collect::<Result<Vec<_>>>()?;
        Self::new(margins, Copula::independence(copula, alphas.len()))
    }

    pub fn dim(&self) -> usize {
        self.margins.len()
    }

    pub fn margins(&self) -> &[Marginal] {
        &self.margins
    }

    pub fn copula(&self) -> &Copula {
        &self.copula
    }

    pub fn marginal_family(&self) -> MarginalFamily {
        self.margins[0].family()
    }

    /// Log density of `b = log w`.
    #[inline]
    pub fn log_density_log_scale(&self, b: &[f64]) -> f64 {
        let m = self.dim();
        let mut coord = [0.0; MAX_TYPES];
        let mut v = 0.0;
        for j in 0..m {
            v += self.margins[j].ln_pdf_log_scale(b[j]);
            coord[j] = self.coords[j].eval(&self.margins[j], b[j]);
        }
        v + match &self.copula {
            Copula::Clayton { param, .. } => clayton_log_density_ln_u(param.alpha(), &coord[..m]),
            Copula::Gaussian(r) => r.log_density_scores(&coord[..m]),
        }
    }

    /// As [`JointFrailty::log_density_log_scale`] without the tables.
    pub fn log_density_log_scale_exact(&self, b: &[f64]) -> f64 {
        let m = self.dim();
        let mut lower = [0.0; MAX_TYPES];
        let mut upper = [0.0; MAX_TYPES];
        let mut v = 0.0;
        for j in 0..m {
            v += self.margins[j].ln_pdf_log_scale(b[j]);
            let (lo, up) = self.margins[j].cdf_tails_log_scale(b[j]);
            lower[j] = lo;
            upper[j] = up;
        }
        v + self.copula.log_density_tails(&lower[..m], &upper[..m])
    }

    /// Draws `b = log w` from the joint law.
    pub fn sample_log_scale<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.dim();
        let mut lower = vec![0.0; m];
        let mut upper = vec![0.0; m];
        self.copula.sample_tails(rng, &mut lower, &mut upper);
        (0..m).map(|j| self.margins[j].log_scale_quantile_tails(lower[j], upper[j])).collect()
    }
}

/// Scale on which [`ConditionalTarget::log_target`] takes its argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrailtyScale {
    /// Frailty `w > 0` (gamma margins).
    W,
    /// Random effect `b = log w` (Gaussian margins).
    B,
}

/// Unnormalized posterior of one subject's frailty vector.
///
/// `hazard[j]` is `Λ0j(τ_i) exp(x_i'β_j)`; `counts[j]` is `n_ij`.
#[derive(Debug, Clone)]
pub struct ConditionalTarget<'a> {
    joint: &'a JointFrailty,
    counts: &'a [f64],
    hazard: &'a [f64],
}

impl<'a> ConditionalTarget<'a> {
    pub fn new(joint: &'a JointFrailty, counts: &'a [f64], hazard: &'a [f64]) -> Result<Self> {
        let m = joint.dim();
        if counts.len() != m || hazard.len() != m {
            return Err(Error::domain(format!("target needs {m} counts and hazards")));
        }
        if hazard.iter().any(|h| !(*h >= 0.0) || !h.is_finite()) {
            return Err(Error::domain("cumulative hazards must be finite and non-negative"));
        }
        Ok(ConditionalTarget { joint, counts, hazard })
    }

    pub fn scale(&self) -> FrailtyScale {
        match self.joint.marginal_family() {
            MarginalFamily::Gamma => FrailtyScale::W,
            MarginalFamily::Gaussian => FrailtyScale::B,
        }
    }

    /// Target density of `b = log w`, up to a constant. Non-finite values
    /// map to `−∞`.
    #[inline]
    pub fn log_target_log_scale(&self, b: &[f64]) -> f64 {
        let mut v = 0.0;
        for j in 0..self.joint.dim() {
            v += self.counts[j] * b[j] - self.hazard[j] * b[j].exp();
        }
        let v = v + self.joint.log_density_log_scale(b);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Target on the natural scale (see [`ConditionalTarget::scale`]):
    /// `Σ_j (n_ij log w_ij − hazard_j w_ij) + log g(w_i)`.
    pub fn log_target(&self, x: &[f64]) -> f64 {
        match self.scale() {
            FrailtyScale::B => self.log_target_log_scale(x),
            FrailtyScale::W => {
                if x.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                let b: Vec<f64> = x.iter().map(|w| w.ln()).collect();
                self.log_target_log_scale(&b) - b.iter().sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MHConfig {
    pub n_burn: usize,
    pub n_thin: usize,
    pub n_s: usize,
    pub step_scale: f64,
    pub target_acceptance: f64,
    /// Tune the step toward `target_acceptance` during burn-in.
    pub adapt: bool,
}

impl Default for MHConfig {
    fn default() -> Self {
        MHConfig { n_burn: 500, n_thin: 5, n_s: 500, step_scale: 0.5, target_acceptance: 0.3, adapt: true }
    }
}

impl MHConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_thin == 0 || self.n_s == 0 {
            return Err(Error::Config("n_thin and n_s must be at least 1".into()));
        }
        if !(self.step_scale > 0.0) || !self.step_scale.is_finite() {
            return Err(Error::Config(format!("step_scale must be positive, got {}", self.step_scale)));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("target_acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_proposals(&self) -> usize {
        self.n_burn + self.n_thin * self.n_s
    }
}

/// Per-subject chain: current point, tuned step and private RNG stream.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub b: Vec<f64>,
    pub step: f64,
    rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(m: usize, step: f64, seed: u64) -> Self {
        ChainState { b: vec![0.0; m], step, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// One chain per subject, seeded `master_seed ^ i`.
    pub fn for_subjects(n: usize, m: usize, step: f64, master_seed: u64) -> Vec<Self> {
        (0..n).map(|i| Self::new(m, step, master_seed ^ i as u64)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainStats {
    /// Acceptance rate over the retained (post burn-in) proposals.
    pub acceptance_rate: f64,
    pub proposals: usize,
    pub step: f64,
}

/// Runs `n_burn + n_thin·n_s` random-walk proposals from the chain's current
/// point, appending every `n_thin`-th post-burn-in state (`b` scale,
/// draw-major) to `out`.
pub fn mh_sample(
    target: &ConditionalTarget<'_>,
    cfg: &MHConfig,
    chain: &mut ChainState,
    out: &mut Vec<f64>,
) -> ChainStats {
    let m = target.joint.dim();
    let mut cur = [0.0; MAX_TYPES];
    cur[..m].copy_from_slice(&chain.b);
    let mut prop = [0.0; MAX_TYPES];
    let mut cur_lp = target.log_target_log_scale(&cur[..m]);
    if !cur_lp.is_finite() {
        cur[..m].fill(0.0);
        cur_lp = target.log_target_log_scale(&cur[..m]);
    }
    let mut batch_accept = 0usize;
    let mut accepted = 0usize;
    let total = cfg.total_proposals();
    out.reserve(cfg.n_s * m);
    for k in 0..total {
        for j in 0..m {
            let z: f64 = chain.rng.sample(StandardNormal);
            prop[j] = cur[j] + chain.step * z;
        }
        let lp = target.log_target_log_scale(&prop[..m]);
        let u: f64 = chain.rng.random();
        let accept = lp.is_finite() && u.ln() < lp - cur_lp;
        if accept {
            cur[..m].copy_from_slice(&prop[..m]);
            cur_lp = lp;
        }
        if k < cfg.n_burn {
            batch_accept += accept as usize;
            if cfg.adapt && (k + 1) % ADAPT_BATCH == 0 {
                let rate = batch_accept as f64 / ADAPT_BATCH as f64;
                chain.step = (chain.step * (2.0 * (rate - cfg.target_acceptance)).exp()).clamp(STEP_MIN, STEP_MAX);
                batch_accept = 0;
            }
        } else {
            accepted += accept as usize;
            if (k - cfg.n_burn + 1).is_multiple_of(cfg.n_thin) {
                out.extend_from_slice(&cur[..m]);
            }
        }
    }
    chain.b.copy_from_slice(&cur[..m]);
    let kept = cfg.n_thin * cfg.n_s;
    ChainStats { acceptance_rate: accepted as f64 / kept as f64, proposals: total, step: chain.step }
}

/// Retained draws of every subject with the conditional expectations the
/// M-step consumes.
#[derive(Debug, Clone)]
pub struct FrailtyDraws {
    m: usize,
    /// `b = log w`, per subject, draw-major (`n_s × m`).
    draws: Vec<Vec<f64>>,
    pub acceptance_rate: Vec<f64>,
    pub e_w: Vec<Vec<f64>>,
    pub e_log_w: Vec<Vec<f64>>,
    pub e_b2: Vec<Vec<f64>>,
    /// MC average of `q qᵀ`, `q_j = Φ⁻¹(F_j(w_j))` under the sampling margins.
    pub e_scores: Vec<DMatrix<f64>>,
}

impl FrailtyDraws {
    /// Averages the stored draws. Every expectation is a plain mean over the
    /// subject's retained draws.
    pub fn summarize(m: usize, draws: Vec<Vec<f64>>, acceptance_rate: Vec<f64>, margins: &[Marginal]) -> Result<Self> {
        if margins.len() != m {
            return Err(Error::domain("margin count does not match draw dimension"));
        }
        let n = draws.len();
        let mut e_w = Vec::with_capacity(n);
        let mut e_log_w = Vec::with_capacity(n);
        let mut e_b2 = Vec::with_capacity(n);
        let mut e_scores = Vec::with_capacity(n);
        for b in &draws {
            if b.is_empty() || b.len() % m != 0 {
                return Err(Error::domain("each subject needs at least one full draw"));
            }
            let nq = (b.len() / m) as f64;
            let mut sw = vec![0.0; m];
            let mut sl = vec![0.0; m];
            let mut s2 = vec![0.0; m];
            let mut ss = DMatrix::zeros(m, m);
            let mut q = vec![0.0; m];
            for row in b.chunks_exact(m) {
                for j in 0..m {
                    sw[j] += row[j].exp();
                    sl[j] += row[j];
                    s2[j] += row[j] * row[j];
                    let (lo, up) = margins[j].cdf_tails_log_scale(row[j]);
                    q[j] = normal_score(lo, up);
                }
                for a in 0..m {
                    for c in 0..m {
                        ss[(a, c)] += q[a] * q[c];
                    }
                }
            }
            e_w.push(sw.iter().map(|v| v / nq).collect());
            e_log_w.push(sl.iter().map(|v| v / nq).collect());
            e_b2.push(s2.iter().map(|v| v / nq).collect());
            e_scores.push(ss / nq);
        }
        Ok(FrailtyDraws { m, draws, acceptance_rate, e_w, e_log_w, e_b2, e_scores })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn n_subjects(&self) -> usize {
        self.draws.len()
    }

    pub fn n_draws(&self, i: usize) -> usize {
        self.draws[i].len() / self.m
    }

    /// Log-frailty draws of subject `i`, draw-major.
    pub fn log_frailties(&self, i: usize) -> &[f64] {
        &self.draws[i]
    }

    pub fn all_log_frailties(&self) -> &[Vec<f64>] {
        &self.draws
    }

    /// Subjects whose acceptance rate fell outside `[0.05, 0.95]`.
    pub fn acceptance_warnings(&self) -> Vec<usize> {
        self.acceptance_rate
            .iter()
            .enumerate()
            .filter(|(_, &r)| !(ACCEPTANCE_WARN_LOW..=ACCEPTANCE_WARN_HIGH).contains(&r))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-type `E(w)` columns (`[j][i]`).
    pub fn e_w_by_type(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|j| self.e_w.iter().map(|r| r[j]).collect()).collect()
    }

    pub fn e_log_w_by_type(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|j| self.e_log_w.iter().map(|r| r[j]).collect()).collect()
    }

    pub fn e_b2_by_type(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|j| self.e_b2.iter().map(|r| r[j]).collect()).collect()
    }

    /// Writes `subject_id,q,w_1,…,w_m`, one row per retained draw.
    pub fn write_csv<W: Write>(&self, ids: &[String], mut out: W) -> std::io::Result<()> {
        write!(out, "subject_id,q")?;
        for j in 1..=self.m {
            write!(out, ",w_{j}")?;
        }
        writeln!(out)?;
        for (i, b) in self.draws.iter().enumerate() {
            for (q, row) in b.chunks_exact(self.m).enumerate() {
                write!(out, "{},{}", ids[i], q + 1)?;
                for x in row {
                    write!(out, ",{}", x.exp())?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Samples every subject's posterior. `counts[i][j] = n_ij`,
/// `hazards[i][j] = Λ0j(τ_i) exp(x_i'β_j)`; chains are advanced in place.
pub fn sample_posterior(
    exec: Execution,
    joint: &JointFrailty,
    counts: &[Vec<f64>],
    hazards: &[Vec<f64>],
    chains: &mut [ChainState],
    cfg: &MHConfig,
) -> Result<FrailtyDraws> {
    cfg.validate()?;
    let n = counts.len();
    if hazards.len() != n || chains.len() != n {
        return Err(Error::domain("counts, hazards and chains must cover the same subjects"));
    }
    let targets =
        counts.iter().zip(hazards).map(|(c, h)| ConditionalTarget::new(joint, c, h)).collect::<Result<Vec<_>>>()?;
    let results = parallel::map_slice_mut(exec, chains, |i, chain| {
        let mut out = Vec::with_capacity(cfg.n_s * joint.dim());
        let stats = mh_sample(&targets[i], cfg, chain, &mut out);
        (out, stats.acceptance_rate)
    });
    let (draws, acc): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    FrailtyDraws::summarize(joint.dim(), draws, acc, joint.margins())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copulas::CorrelationMatrix;
    use crate::special::{gamma_pq, gamma_quantile, ln_gamma};
    use approx::assert_relative_eq;

    fn gamma_joint(alpha: f64, m: usize) -> JointFrailty {
        JointFrailty::independent(MarginalFamily::Gamma, CopulaFamily::Clayton, &vec![alpha; m]).unwrap()
    }

    fn run(target: &ConditionalTarget<'_>, cfg: &MHConfig, seed: u64) -> (Vec<f64>, ChainStats) {
        let mut chain = ChainState::new(target.joint.dim(), cfg.step_scale, seed);
        let mut out = Vec::new();
        let s = mh_sample(target, cfg, &mut chain, &mut out);
        (out, s)
    }

    #[test]
    fn zero_data_target_is_prior() {
        let joint = JointFrailty::new(
            vec![
                Marginal::new(MarginalFamily::Gamma, 0.7).unwrap(),
                Marginal::new(MarginalFamily::Gamma, 1.3).unwrap(),
            ],
            Copula::clayton(2, 1.5).unwrap(),
        )
        .unwrap();
        let t = ConditionalTarget::new(&joint, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let w = [0.4, 2.2];
        let g = joint.margins()[0].log_pdf(w[0]).unwrap()
            + joint.margins()[1].log_pdf(w[1]).unwrap()
            + joint
                .copula()
                .log_density(&[joint.margins()[0].cdf(w[0]).unwrap(), joint.margins()[1].cdf(w[1]).unwrap()])
                .unwrap();
        // the target reads the copula coordinates from the Hermite tables
        assert_relative_eq!(t.log_target(&w), g, epsilon = 1e-8);
    }

    #[test]
    fn conjugate_closed_form() {
        // m = 1: target ∝ Gamma(1/α + n, rate 1/α + H) up to a constant
        let alpha = 0.8;
        let (n, h) = (3.0, 1.7);
        let joint = gamma_joint(alpha, 1);
        let (nv, hv) = ([n], [h]);
        let t = ConditionalTarget::new(&joint, &nv, &hv).unwrap();
        let shape = 1.0 / alpha + n;
        let rate = 1.0 / alpha + h;
        let exact = |w: f64| (shape - 1.0) * w.ln() - rate * w + shape * rate.ln() - ln_gamma(shape);
        let offset = t.log_target(&[1.0]) - exact(1.0);
        for w in [0.05, 0.3, 2.0, 6.5] {
            assert_relative_eq!(t.log_target(&[w]) - exact(w), offset, epsilon = 1e-10);
        }
    }

    #[test]
    fn doubling_identity() {
        let joint = JointFrailty::new(
            vec![Marginal::new(MarginalFamily::Gamma, 0.5).unwrap(); 3],
            Copula::clayton(3, 2.0).unwrap(),
        )
        .unwrap();
        let counts = [2.0, 0.0, 5.0];
        let hz = [0.4, 1.1, 0.9];
        let t = ConditionalTarget::new(&joint, &counts, &hz).unwrap();
        let w = [0.7, 1.4, 0.2];
        let w2 = w.map(|x| 2.0 * x);
        let log_g = |x: &[f64]| {
            let zero = ConditionalTarget::new(&joint, &[0.0; 3], &[0.0; 3]).unwrap();
            zero.log_target(x)
        };
        let expected: f64 = (0..3).map(|j| counts[j] * 2f64.ln() - hz[j] * w[j]).sum::<f64>() + log_g(&w2) - log_g(&w);
        assert_relative_eq!(t.log_target(&w2) - t.log_target(&w), expected, epsilon = 1e-10);
    }

    #[test]
    fn out_of_support_is_negative_infinity() {
        let joint = gamma_joint(1.0, 2);
        let t = ConditionalTarget::new(&joint, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t.log_target(&[-1.0, 1.0]), f64::NEG_INFINITY);
        assert_eq!(t.log_target(&[0.0, 1.0]), f64::NEG_INFINITY);
        let gj = JointFrailty::new(
            vec![Marginal::new(MarginalFamily::Gaussian, 1.0).unwrap(); 2],
            Copula::Gaussian(CorrelationMatrix::exchangeable(2, 0.5).unwrap()),
        )
        .unwrap();
        let t = ConditionalTarget::new(&gj, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t.scale(), FrailtyScale::B);
        assert!(t.log_target(&[-3.0, 40.0]).is_finite() || t.log_target(&[-3.0, 40.0]) == f64::NEG_INFINITY);
    }

    #[test]
    fn conjugate_posterior_mean() {
        let alpha = 1.0;
        let joint = gamma_joint(alpha, 1);
        let cfg = MHConfig { n_s: 2000, ..MHConfig::default() };
        for (k, (n, h)) in [(0.0, 0.5), (2.0, 1.0), (7.0, 3.0)].into_iter().enumerate() {
            let (nv, hv) = ([n], [h]);
            let t = ConditionalTarget::new(&joint, &nv, &hv).unwrap();
            let (draws, _) = run(&t, &cfg, 100 + k as u64);
            let mean = draws.iter().map(|b| b.exp()).sum::<f64>() / draws.len() as f64;
            let exact = (1.0 / alpha + n) / (1.0 / alpha + h);
            assert!((mean / exact - 1.0).abs() < 0.05, "n={n} h={h}: {mean} vs {exact}");
        }
    }

    #[test]
    fn degenerate_step_accepts_everything() {
        let joint = gamma_joint(1.0, 2);
        let t = ConditionalTarget::new(&joint, &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let cfg = MHConfig { step_scale: 1e-9, adapt: false, n_burn: 0, n_s: 200, ..MHConfig::default() };
        let (draws, stats) = run(&t, &cfg, 5);
        assert!(stats.acceptance_rate > 0.99);
        let first = draws[0];
        assert!(draws.chunks(2).all(|r| (r[0] - first).abs() < 1e-6));
    }

    #[test]
    fn proposal_accounting_and_reproducibility() {
        let joint = gamma_joint(0.5, 3);
        let t = ConditionalTarget::new(&joint, &[1.0, 0.0, 2.0], &[0.3, 0.3, 0.3]).unwrap();
        let cfg = MHConfig { n_burn: 37, n_thin: 3, n_s: 11, ..MHConfig::default() };
        let (a, s) = run(&t, &cfg, 42);
        let (b, _) = run(&t, &cfg, 42);
        assert_eq!(s.proposals, 37 + 3 * 11);
        assert_eq!(a.len(), 33);
        assert_eq!(a, b);
    }

    #[test]
    fn prior_recovery_ks() {
        let alpha = 0.6;
        let joint = gamma_joint(alpha, 2);
        let t = ConditionalTarget::new(&joint, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let cfg = MHConfig { n_s: 2000, ..MHConfig::default() };
        let (draws, _) = run(&t, &cfg, 7);
        let mut w: Vec<f64> = draws.chunks(2).map(|r| r[0].exp()).collect();
        w.sort_by(f64::total_cmp);
        let shape = 1.0 / alpha;
        let lg = ln_gamma(shape);
        let n = w.len() as f64;
        let ks = w
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let f = gamma_pq(shape, x / alpha, lg).0;
                (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS distance {ks}");
    }

    #[test]
    fn conjugate_chi_square() {
        let alpha = 0.5;
        let (n, h) = (4.0, 2.0);
        let joint = gamma_joint(alpha, 1);
        let (nv, hv) = ([n], [h]);
        let t = ConditionalTarget::new(&joint, &nv, &hv).unwrap();
        let cfg = MHConfig { n_s: 5000, ..MHConfig::default() };
        let (draws, _) = run(&t, &cfg, 8);
        let shape = 1.0 / alpha + n;
        let rate = 1.0 / alpha + h;
        let lg = ln_gamma(shape);
        let edges: Vec<f64> = (1..20).map(|k| gamma_quantile(shape, k as f64 / 20.0, lg) / rate).collect();
        let mut counts = [0usize; 20];
        for b in &draws {
            counts[edges.partition_point(|&e| e < b.exp())] += 1;
        }
        let expected = draws.len() as f64 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-squared with 19 degrees of freedom
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    #[test]
    fn summaries_are_draw_averages() {
        let margins = vec![Marginal::new(MarginalFamily::Gamma, 1.0).unwrap(); 2];
        let c: f64 = 1.7;
        let d = FrailtyDraws::summarize(2, vec![vec![c.ln(); 10]], vec![0.3], &margins).unwrap();
        assert_relative_eq!(d.e_w[0][0], c, epsilon = 1e-14);
        assert_relative_eq!(d.e_log_w[0][1], c.ln(), epsilon = 1e-15);
        // three hand draws for the score outer product: w with F(w) = u
        let us = [[0.2, 0.7], [0.5, 0.5], [0.9, 0.1]];
        let b: Vec<f64> = us.iter().flat_map(|u| u.map(|x| (-(1.0_f64 - x).ln()).ln())).collect();
        let d = FrailtyDraws::summarize(2, vec![b], vec![0.3], &margins).unwrap();
        let q: Vec<[f64; 2]> = us.iter().map(|u| u.map(crate::special::std_normal_quantile)).collect();
        let s01 = q.iter().map(|r| r[0] * r[1]).sum::<f64>() / 3.0;
        let s00 = q.iter().map(|r| r[0] * r[0]).sum::<f64>() / 3.0;
        assert_relative_eq!(d.e_scores[0][(0, 1)], s01, epsilon = 1e-9);
        assert_relative_eq!(d.e_scores[0][(0, 0)], s00, epsilon = 1e-9);
        for i in 0..d.n_subjects() {
            for j in 0..2 {
                assert!(d.e_log_w[i][j] <= d.e_w[i][j].ln() + 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let joint = JointFrailty::new(
            vec![Marginal::new(MarginalFamily::Gaussian, 0.5).unwrap(); 3],
            Copula::Gaussian(CorrelationMatrix::exchangeable(3, 0.4).unwrap()),
        )
        .unwrap();
        let counts: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 3) as f64, 1.0, 0.0]).collect();
        let hz: Vec<Vec<f64>> = (0..20).map(|i| vec![0.5 + i as f64 * 0.05; 3]).collect();
        let cfg = MHConfig { n_burn: 50, n_s: 40, ..MHConfig::default() };
        let mut c1 = ChainState::for_subjects(20, 3, 0.5, 11);
        let mut c2 = c1.clone();
        let a = sample_posterior(Execution::Parallel, &joint, &counts, &hz, &mut c1, &cfg).unwrap();
        let b = sample_posterior(Execution::Sequential, &joint, &counts, &hz, &mut c2, &cfg).unwrap();
        assert_eq!(a.all_log_frailties(), b.all_log_frailties());
        assert_eq!(a.e_w, b.e_w);
    }

    #[test]
    fn tabulated_density_matches_exact() {
        use crate::copulas::CorrelationMatrix;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (MarginalFamily::Gamma, Copula::clayton(3, 1.333).unwrap(), vec![0.25, 1.0, 4.0]),
            (MarginalFamily::Gaussian, Copula::clayton(3, 8.0).unwrap(), vec![0.5, 1.0, 2.0]),
            (
                MarginalFamily::Gamma,
                Copula::Gaussian(CorrelationMatrix::exchangeable(3, 0.6).unwrap()),
                vec![0.1, 1.0, 3.0],
            ),
            (
                MarginalFamily::Gaussian,
                Copula::Gaussian(CorrelationMatrix::exchangeable(3, -0.3).unwrap()),
                vec![1.0, 1.0, 0.3],
            ),
        ];
        for (family, copula, alphas) in cases {
            let margins = alphas.iter().map(|&a| Marginal::new(family, a).unwrap()).collect();
            let g = JointFrailty::new(margins, copula).unwrap();
            for _ in 0..5000 {
                let b: Vec<f64> = (0..3).map(|_| 6.0 * rng.random::<f64>() - 4.5).collect();
                let (fast, exact) = (g.log_density_log_scale(&b), g.log_density_log_scale_exact(&b));
                assert!((fast - exact).abs() < 1e-7 * (1.0 + exact.abs()), "{b:?}: {fast} vs {exact}");
            }
        }
    }
}
