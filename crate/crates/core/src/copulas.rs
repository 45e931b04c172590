//! Clayton and Gaussian copulas: densities, samplers, Kendall's tau, the
//! expected copula log-likelihood `Q3` and its maximizers.
//!
//! Uniforms are handled as tail pairs `(u, 1 - u)` internally so that
//! frailties far in either tail keep their precision after the marginal CDF.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::marginals::Marginal;
use crate::parallel::{self, Execution};
use crate::special::{std_normal_cdf, std_normal_quantile_tails, std_normal_sf};

/// Below this the Clayton copula is treated as the independence copula.
pub const CLAYTON_INDEPENDENCE: f64 = 1e-6;
/// Maximizer estimates below this are reported as exactly 0.
pub const CLAYTON_REPORT_ZERO: f64 = 1e-4;
pub const CLAYTON_ALPHA_MAX: f64 = 50.0;
/// Uniforms closer than this to 0 or 1 are clamped before taking normal scores.
pub const SCORE_CLAMP_U: f64 = 1e-12;
const MIN_EIGENVALUE: f64 = 1e-10;
const PROJECTION_FLOOR: f64 = 1e-8;
/// Smallest log-uniform admitted in the fast density path.
const LN_U_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CopulaFamily {
    Clayton,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaytonParam {
    alpha_c: f64,
}

impl ClaytonParam {
    pub fn new(alpha_c: f64) -> Result<Self> {
        if !(alpha_c >= 0.0) || !alpha_c.is_finite() {
            return Err(Error::domain(format!("Clayton parameter must be >= 0, got {alpha_c}")));
        }
        Ok(ClaytonParam { alpha_c })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_c
    }

    pub fn kendall_tau(&self) -> f64 {
        self.alpha_c / (self.alpha_c + 2.0)
    }

    pub fn is_independence(&self) -> bool {
        self.alpha_c < CLAYTON_INDEPENDENCE
    }
}

/// Symmetric positive-definite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    mat: DMatrix<f64>,
    inv: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    log_det: f64,
}

impl CorrelationMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let m = mat.nrows();
        if m == 0 || mat.ncols() != m {
            return Err(Error::Matrix("correlation matrix must be square and non-empty".into()));
        }
        for i in 0..m {
            if (mat[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::Matrix(format!("diagonal entry {i} is {} not 1", mat[(i, i)])));
            }
            for j in 0..i {
                if (mat[(i, j)] - mat[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Matrix("correlation matrix is not symmetric".into()));
                }
                if !(mat[(i, j)].abs() < 1.0) {
                    return Err(Error::Matrix(format!(
                        "off-diagonal entry ({i},{j}) = {} outside (-1, 1)",
                        mat[(i, j)]
                    )));
                }
            }
        }
        let min_eig = mat.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > MIN_EIGENVALUE) {
            return Err(Error::Matrix(format!(
                "correlation matrix not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let chol = mat.clone().cholesky().ok_or_else(|| Error::Matrix("Cholesky factorization failed".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().take(m).map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        let chol_lower = chol.l();
        Ok(CorrelationMatrix { mat, inv, chol_lower, log_det })
    }

    pub fn identity(m: usize) -> Self {
        Self::new(DMatrix::identity(m, m)).expect("identity is a correlation matrix")
    }

    pub fn exchangeable(m: usize, rho: f64) -> Result<Self> {
        let mut mat = DMatrix::from_element(m, m, rho);
        mat.fill_diagonal(1.0);
        Self::new(mat)
    }

    /// Builds from the strict upper triangle in row-major order
    /// (`ρ12, ρ13, …, ρ1m, ρ23, …`).
    pub fn from_pairs(m: usize, pairs: &[f64]) -> Result<Self> {
        if pairs.len() != m * (m - 1) / 2 {
            return Err(Error::Matrix(format!("expected {} correlations, got {}", m * (m - 1) / 2, pairs.len())));
        }
        let mut mat = DMatrix::identity(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in i + 1..m {
                mat[(i, j)] = pairs[k];
                mat[(j, i)] = pairs[k];
                k += 1;
            }
        }
        Self::new(mat)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn pairs(&self) -> Vec<f64> {
        let m = self.dim();
        let mut out = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in i + 1..m {
                out.push(self.mat[(i, j)]);
            }
        }
        out
    }

    /// `−½ log|R| − ½ q'(R⁻¹ − I)q`.
    #[inline]
    pub fn log_density_scores(&self, q: &[f64]) -> f64 {
        let m = self.dim();
        let mut quad = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..m {
                row += self.inv[(i, j)] * q[j];
            }
            quad += q[i] * (row - q[i]);
        }
        -0.5 * self.log_det - 0.5 * quad
    }
}

/// Nearest correlation matrix by eigenvalue clipping and unit-diagonal
/// rescaling; returns the input unchanged when it is already positive
/// definite.
pub fn project_to_correlation(mat: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = mat.clone().symmetric_eigen();
    if eig.eigenvalues.min() > MIN_EIGENVALUE {
        return (mat.clone(), false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(PROJECTION_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: DVector<f64> = rebuilt.diagonal().map(|v| 1.0 / v.sqrt());
    let mut out = DMatrix::from_diagonal(&d) * rebuilt * DMatrix::from_diagonal(&d);
    out.fill_diagonal(1.0);
    let sym = (&out + out.transpose()) * 0.5;
    (sym, true)
}

/// Log of a uniform given its tails, floored to keep the fast path finite.
#[inline]
pub fn ln_uniform(lower: f64, upper: f64) -> f64 {
    let v = if lower < 0.5 { lower.ln() } else { (-upper).ln_1p() };
    v.max(LN_U_FLOOR)
}

/// Normal score `Φ⁻¹(u)` with `u` clamped to `[1e-12, 1 - 1e-12]`.
#[inline]
pub fn normal_score(lower: f64, upper: f64) -> f64 {
    if lower < SCORE_CLAMP_U {
        std_normal_quantile_tails(SCORE_CLAMP_U, 1.0 - SCORE_CLAMP_U)
    } else if upper < SCORE_CLAMP_U {
        std_normal_quantile_tails(1.0 - SCORE_CLAMP_U, SCORE_CLAMP_U)
    } else {
        std_normal_quantile_tails(lower, upper)
    }
}

/// Clayton log density from log-uniforms (all `≤ 0`).
#[inline]
pub fn clayton_log_density_ln_u(alpha: f64, ln_u: &[f64]) -> f64 {
    if alpha < CLAYTON_INDEPENDENCE {
        return 0.0;
    }
    let m = ln_u.len();
    let mut norm = 0.0;
    for j in 1..m {
        norm += (j as f64 * alpha).ln_1p();
    }
    let mut t = 0.0;
    let mut sum_ln = 0.0;
    for &l in ln_u {
        t += (-alpha * l).exp_m1();
        sum_ln += l;
    }
    norm - (1.0 / alpha + m as f64) * t.ln_1p() - (alpha + 1.0) * sum_ln
}

/// Value, first and second derivative in `alpha` of the Clayton log density.
fn clayton_log_density_derivs(alpha: f64, ln_u: &[f64]) -> (f64, f64, f64) {
    let m = ln_u.len();
    let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for j in 1..m {
        let jf = j as f64;
        v += (jf * alpha).ln_1p();
        d1 += jf / (1.0 + jf * alpha);
        d2 -= (jf / (1.0 + jf * alpha)).powi(2);
    }
    let (mut t, mut a1, mut a2, mut sum_ln) = (0.0, 0.0, 0.0, 0.0);
    for &l in ln_u {
        let e = (-alpha * l).exp();
        t += (-alpha * l).exp_m1();
        a1 += -l * e;
        a2 += l * l * e;
        sum_ln += l;
    }
    let a = 1.0 + t;
    let ln_a = t.ln_1p();
    let k = 1.0 / alpha + m as f64;
    let r1 = a1 / a;
    let r2 = a2 / a;
    v += -k * ln_a - (alpha + 1.0) * sum_ln;
    d1 += ln_a / (alpha * alpha) - k * r1 - sum_ln;
    d2 += -2.0 * ln_a / alpha.powi(3) + 2.0 * r1 / (alpha * alpha) - k * (r2 - r1 * r1);
    (v, d1, d2)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Copula {
    Clayton { dim: usize, param: ClaytonParam },
    Gaussian(CorrelationMatrix),
}

/// Kendall's tau of a copula: a single value for the exchangeable Clayton
/// family, pairwise for the Gaussian family.
#[derive(Debug, Clone, PartialEq)]
pub enum KendallTau {
    Scalar(f64),
    Pairwise(DMatrix<f64>),
}

impl Copula {
    pub fn independence(family: CopulaFamily, m: usize) -> Self {
        match family {
            CopulaFamily::Clayton => Copula::Clayton { dim: m, param: ClaytonParam { alpha_c: 0.0 } },
            CopulaFamily::Gaussian => Copula::Gaussian(CorrelationMatrix::identity(m)),
        }
    }

    pub fn clayton(m: usize, alpha_c: f64) -> Result<Self> {
        Ok(Copula::Clayton { dim: m, param: ClaytonParam::new(alpha_c)? })
    }

    pub fn family(&self) -> CopulaFamily {
        match self {
            Copula::Clayton { .. } => CopulaFamily::Clayton,
            Copula::Gaussian(_) => CopulaFamily::Gaussian,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Copula::Clayton { dim, .. } => *dim,
            Copula::Gaussian(r) => r.dim(),
        }
    }

    /// Free parameters: `[alpha_c]` or the pairwise correlations.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Copula::Clayton { param, .. } => vec![param.alpha()],
            Copula::Gaussian(r) => r.pairs(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Copula::Clayton { .. } => 1,
            Copula::Gaussian(r) => r.dim() * (r.dim() - 1) / 2,
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        match self {
            Copula::Clayton { dim, .. } => Copula::clayton(*dim, params[0]),
            Copula::Gaussian(r) => Ok(Copula::Gaussian(CorrelationMatrix::from_pairs(r.dim(), params)?)),
        }
    }

    /// Parameter names in [`Copula::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        match self {
            Copula::Clayton { .. } => vec!["alpha_c".into()],
            Copula::Gaussian(r) => {
                let m = r.dim();
                let mut v = Vec::new();
                for i in 0..m {
                    for j in i + 1..m {
                        v.push(format!("rho_{}{}", i + 1, j + 1));
                    }
                }
                v
            }
        }
    }

    /// Log copula density at `u ∈ (0,1)^m`.
    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::domain(format!("expected {} uniforms, got {}", self.dim(), u.len())));
        }
        if let Some(bad) = u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::domain(format!("uniform {bad} not in (0, 1)")));
        }
        let upper: Vec<f64> = u.iter().map(|x| 1.0 - x).collect();
        Ok(self.log_density_tails(u, &upper))
    }

    /// Unchecked density on tail pairs; used inside the samplers.
    #[inline]
    pub fn log_density_tails(&self, lower: &[f64], upper: &[f64]) -> f64 {
        match self {
            Copula::Clayton { param, .. } => {
                if param.is_independence() {
                    return 0.0;
                }
                let mut buf = [0.0; 16];
                if lower.len() <= buf.len() {
                    for (j, b) in buf.iter_mut().take(lower.len()).enumerate() {
                        *b = ln_uniform(lower[j], upper[j]);
                    }
                    clayton_log_density_ln_u(param.alpha(), &buf[..lower.len()])
                } else {
                    let v: Vec<f64> = lower.iter().zip(upper).map(|(&l, &u)| ln_uniform(l, u)).collect();
                    clayton_log_density_ln_u(param.alpha(), &v)
                }
            }
            Copula::Gaussian(r) => {
                let m = r.dim();
                let mut buf = [0.0; 16];
                if m <= buf.len() {
                    for (j, b) in buf.iter_mut().take(m).enumerate() {
                        *b = normal_score(lower[j], upper[j]);
                    }
                    r.log_density_scores(&buf[..m])
                } else {
                    let q: Vec<f64> = lower.iter().zip(upper).map(|(&l, &u)| normal_score(l, u)).collect();
                    r.log_density_scores(&q)
                }
            }
        }
    }

    /// Draws one vector of tail pairs `(u_j, 1 - u_j)`.
    pub fn sample_tails<R: Rng + ?Sized>(&self, rng: &mut R, lower: &mut [f64], upper: &mut [f64]) {
        match self {
            Copula::Clayton { param, .. } => {
                if param.is_independence() {
                    for j in 0..lower.len() {
                        let u: f64 = rng.random();
                        let u = u.max(f64::MIN_POSITIVE);
                        lower[j] = u;
                        upper[j] = 1.0 - u;
                    }
                    return;
                }
                // Marshall–Olkin: V ~ Gamma(1/α), u_j = (1 + E_j / V)^{-1/α}
                let a = param.alpha();
                let v: f64 = Gamma::new(1.0 / a, 1.0).expect("valid gamma").sample(rng);
                for j in 0..lower.len() {
                    let e: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    let s = -e.ln() / v;
                    let ln_u = -s.ln_1p() / a;
                    lower[j] = ln_u.exp();
                    upper[j] = -ln_u.exp_m1();
                }
            }
            Copula::Gaussian(r) => {
                let m = r.dim();
                let z: DVector<f64> = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
                let x = &r.chol_lower * z;
                for j in 0..m {
                    lower[j] = std_normal_cdf(x[j]);
                    upper[j] = std_normal_sf(x[j]);
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.dim();
        let mut lower = vec![0.0; m];
        let mut upper = vec![0.0; m];
        self.sample_tails(rng, &mut lower, &mut upper);
        lower
    }

    pub fn kendall_tau(&self) -> KendallTau {
        match self {
            Copula::Clayton { param, .. } => KendallTau::Scalar(param.kendall_tau()),
            Copula::Gaussian(r) => KendallTau::Pairwise(r.matrix().map(|rho| 2.0 / PI * rho.asin())),
        }
    }
}

/// Log-uniforms and normal scores of MC frailty draws, per subject.
///
/// `ln_u[i]` and `scores[i]` hold `n_draws(i) × m` values, draw-major.
#[derive(Debug, Clone)]
pub struct CopulaDraws {
    m: usize,
    ln_u: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
}

impl CopulaDraws {
    /// Transforms log-frailty draws `b` (per subject, draw-major) through the
    /// marginal CDFs.
    pub fn from_log_frailties(exec: Execution, log_frailties: &[Vec<f64>], margins: &[Marginal]) -> Self {
        let m = margins.len();
        let both: Vec<(Vec<f64>, Vec<f64>)> = parallel::map_slice(exec, log_frailties, |_, b| {
            let mut lu = Vec::with_capacity(b.len());
            let mut sc = Vec::with_capacity(b.len());
            for (k, &x) in b.iter().enumerate() {
                let (lo, up) = margins[k % m].cdf_tails_log_scale(x);
                lu.push(ln_uniform(lo, up));
                sc.push(normal_score(lo, up));
            }
            (lu, sc)
        });
        let (ln_u, scores) = both.into_iter().unzip();
        CopulaDraws { m, ln_u, scores }
    }

    /// Builds directly from uniforms (per subject, draw-major).
    pub fn from_uniforms(m: usize, uniforms: &[Vec<f64>]) -> Result<Self> {
        let mut ln_u = Vec::with_capacity(uniforms.len());
        let mut scores = Vec::with_capacity(uniforms.len());
        for u in uniforms {
            if u.len() % m != 0 || u.is_empty() {
                return Err(Error::domain("uniform draws must be a non-empty multiple of m"));
            }
            if let Some(bad) = u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::domain(format!("uniform {bad} not in (0, 1)")));
            }
            ln_u.push(u.iter().map(|&x| ln_uniform(x, 1.0 - x)).collect());
            scores.push(u.iter().map(|&x| normal_score(x, 1.0 - x)).collect());
        }
        Ok(CopulaDraws { m, ln_u, scores })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn n_subjects(&self) -> usize {
        self.ln_u.len()
    }

    /// Per-subject MC average of the score outer products `q qᵀ`.
    pub fn score_products(&self) -> Vec<DMatrix<f64>> {
        let m = self.m;
        self.scores
            .iter()
            .map(|s| {
                let nq = s.len() / m;
                let mut acc = DMatrix::zeros(m, m);
                for q in s.chunks_exact(m) {
                    for a in 0..m {
                        for b in 0..m {
                            acc[(a, b)] += q[a] * q[b];
                        }
                    }
                }
                acc / nq as f64
            })
            .collect()
    }
}

/// MC estimate of the expected Clayton copula log-likelihood, summed over
/// subjects and averaged over each subject's draws.
pub fn q3_clayton(alpha_c: f64, draws: &CopulaDraws) -> Result<f64> {
    if !(alpha_c > 0.0) {
        return Err(Error::domain(format!("Clayton Q3 needs alpha_c > 0, got {alpha_c}")));
    }
    Ok(q3_clayton_unchecked(alpha_c, draws, Execution::Sequential))
}

fn q3_clayton_unchecked(alpha: f64, draws: &CopulaDraws, exec: Execution) -> f64 {
    let m = draws.m;
    parallel::map_slice(exec, &draws.ln_u, |_, lu| {
        let nq = lu.len() / m;
        lu.chunks_exact(m).map(|c| clayton_log_density_ln_u(alpha, c)).sum::<f64>() / nq as f64
    })
    .into_iter()
    .sum()
}

fn q3_clayton_derivs(alpha: f64, draws: &CopulaDraws, exec: Execution) -> (f64, f64, f64) {
    let m = draws.m;
    parallel::map_slice(exec, &draws.ln_u, |_, lu| {
        let nq = lu.len() as f64 / m as f64;
        let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for c in lu.chunks_exact(m) {
            let (a, b, cc) = clayton_log_density_derivs(alpha, c);
            v += a;
            d1 += b;
            d2 += cc;
        }
        (v / nq, d1 / nq, d2 / nq)
    })
    .into_iter()
    .fold((0.0, 0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2))
}

/// `Σ_i [−½ log|R| − ½ tr((R⁻¹ − I) S_i)]`.
pub fn q3_gaussian(r: &CorrelationMatrix, score_products: &[DMatrix<f64>]) -> f64 {
    let m = r.dim();
    let mut total = DMatrix::zeros(m, m);
    for s in score_products {
        total += s;
    }
    q3_gaussian_total(r, &total, score_products.len())
}

fn q3_gaussian_total(r: &CorrelationMatrix, total: &DMatrix<f64>, n: usize) -> f64 {
    let m = r.dim();
    let mut tr = 0.0;
    for a in 0..m {
        for b in 0..m {
            let k = r.inv[(a, b)] - if a == b { 1.0 } else { 0.0 };
            tr += k * total[(b, a)];
        }
    }
    -0.5 * n as f64 * r.log_det - 0.5 * tr
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopulaEstimate {
    pub copula: Copula,
    /// Set when the Gaussian estimate had to be projected back to a positive
    /// definite correlation matrix.
    pub projected: bool,
}

/// Maximizes `Q3` with the margins held at their stage-one estimates.
///
/// Clayton: bracketed Newton on the analytic score over `[0, 50]`, with
/// bisection whenever a Newton step leaves the bracket or curvature is not
/// negative; estimates below `1e-4` are reported as 0. Gaussian: Newton
/// ascent over Fisher-z transformed pairwise correlations.
pub fn maximize_q3(draws: &CopulaDraws, init: &Copula, exec: Execution) -> Result<CopulaEstimate> {
    match init {
        Copula::Clayton { dim, param } => {
            let a = maximize_clayton(draws, param.alpha(), exec)?;
            Ok(CopulaEstimate { copula: Copula::clayton(*dim, a)?, projected: false })
        }
        Copula::Gaussian(r) => maximize_gaussian(draws, r),
    }
}

fn maximize_clayton(draws: &CopulaDraws, init: f64, exec: Execution) -> Result<f64> {
    if draws.m < 2 {
        return Ok(0.0);
    }
    let score = |a: f64| q3_clayton_derivs(a, draws, exec);
    let mut lo = CLAYTON_INDEPENDENCE;
    let mut hi = CLAYTON_ALPHA_MAX;
    if score(lo).1 <= 0.0 {
        return Ok(0.0);
    }
    if score(hi).1 >= 0.0 {
        return Ok(CLAYTON_ALPHA_MAX);
    }
    let mut a = if init > lo && init < hi { init } else { 1.0 };
    let tol = 1e-10;
    for _ in 0..200 {
        let (_, g, h) = score(a);
        if g > 0.0 {
            lo = a;
        } else {
            hi = a;
        }
        let scale = draws.n_subjects().max(1) as f64;
        if g.abs() < tol * scale || hi - lo < 1e-12 * a.max(1.0) {
            return Ok(if a < CLAYTON_REPORT_ZERO { 0.0 } else { a });
        }
        let mut next = if h < 0.0 { a - g / h } else { f64::NAN };
        if !(next > lo && next < hi) {
            // bisect in log space, since the bracket spans several decades
            next = (lo.ln() + hi.ln()).mul_add(0.5, 0.0).exp();
        }
        a = next;
    }
    Err(Error::Optimization { iterations: 200, last: a })
}

fn fisher_z(rho: f64) -> f64 {
    rho.atanh()
}

fn maximize_gaussian(draws: &CopulaDraws, init: &CorrelationMatrix) -> Result<CopulaEstimate> {
    let m = draws.m;
    if m < 2 {
        return Ok(CopulaEstimate { copula: Copula::Gaussian(CorrelationMatrix::identity(m)), projected: false });
    }
    let n = draws.n_subjects();
    let mut total = DMatrix::zeros(m, m);
    for s in draws.score_products() {
        total += s;
    }
    let k = m * (m - 1) / 2;
    let objective = |z: &[f64]| -> Option<(f64, CorrelationMatrix)> {
        let rho: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let r = CorrelationMatrix::from_pairs(m, &rho).ok()?;
        Some((q3_gaussian_total(&r, &total, n), r))
    };
    // analytic gradient in ρ: −n (R⁻¹)_ab + (R⁻¹ S R⁻¹)_ab, chained through tanh
    let gradient = |z: &[f64], r: &CorrelationMatrix| -> Vec<f64> {
        let inv = r.inverse();
        let g = inv * &total * inv;
        let mut out = Vec::with_capacity(k);
        let mut idx = 0;
        for a in 0..m {
            for b in a + 1..m {
                let d_rho = -(n as f64) * inv[(a, b)] + g[(a, b)];
                let t = z[idx].tanh();
                out.push(d_rho * (1.0 - t * t));
                idx += 1;
            }
        }
        out
    };
    let mut z: Vec<f64> = init.pairs().iter().map(|&r| fisher_z(r.clamp(-0.999, 0.999))).collect();
    let (mut f, mut r) = objective(&z).ok_or_else(|| Error::Matrix("initial correlation not PD".into()))?;
    let tol = 1e-8 * (n.max(1) as f64);
    let max_iter = 200;
    for _ in 0..max_iter {
        let g = gradient(&z, &r);
        let gmax = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if gmax < tol {
            break;
        }
        // finite-difference Hessian of the analytic gradient
        let mut h = DMatrix::zeros(k, k);
        for c in 0..k {
            let step = 1e-5 * (1.0 + z[c].abs());
            let mut zp = z.clone();
            zp[c] += step;
            let mut zm = z.clone();
            zm[c] -= step;
            let gp = objective(&zp).map(|(_, rp)| gradient(&zp, &rp));
            let gm = objective(&zm).map(|(_, rm)| gradient(&zm, &rm));
            match (gp, gm) {
                (Some(gp), Some(gm)) => {
                    for rrow in 0..k {
                        h[(rrow, c)] = (gp[rrow] - gm[rrow]) / (2.0 * step);
                    }
                }
                _ => {
                    h[(c, c)] = -1.0;
                }
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let neg = -h;
        let gv = DVector::from_vec(g.clone());
        let dir = match neg.clone().cholesky() {
            Some(ch) => ch.solve(&gv),
            None => gv.clone() / (1.0 + gmax),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if let Some((fc, rc)) = objective(&cand) {
                if fc >= f {
                    z = cand;
                    f = fc;
                    r = rc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (mat, projected) = project_to_correlation(r.matrix());
    let r = if projected { CorrelationMatrix::new(mat)? } else { r };
    Ok(CopulaEstimate { copula: Copula::Gaussian(r), projected })
}
