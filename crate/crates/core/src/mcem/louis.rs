//! Observed information by Louis's identity over `(β, α, baseline jumps)`.
//!
//! Subjects are independent given the data, so the missing-information term
//! `E[S S'] − E[S] E[S]'` is a sum of per-subject covariances. The random part
//! of subject `i`'s complete-data score is linear in
//! `z_i = (w_i1, …, w_im, ∂ log g(b_i|α)/∂α)`, giving `Σ_i A_i Cov(z_i) A_i'`.

use nalgebra::{DMatrix, DVector};

use crate::copulas::{Copula, CLAYTON_INDEPENDENCE};
use crate::error::Result;
use crate::event_data::{Dataset, RiskSetIndex};
use crate::frailty_posterior::{FrailtyDraws, JointFrailty};
use crate::marginals::{Marginal, MarginalFamily};
use crate::parallel::{self, Execution};

use super::params::ParameterVector;

/// Clayton estimates below this sit on the boundary of the parameter space;
/// their standard error is withheld.
pub const CLAYTON_SE_MIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct LouisInformation {
    /// Observed information over the included `(β, α)` coordinates followed
    /// by every baseline jump.
    pub info: DMatrix<f64>,
    /// Covariance of the included `(β, α)` coordinates (baseline profiled out).
    pub covariance: Option<DMatrix<f64>>,
    /// Standard errors aligned with [`ParameterVector::monitored`]; `None`
    /// where the coordinate was excluded or the information is not PD.
    pub std_errors: Vec<Option<f64>>,
    /// Monte Carlo mean of the complete-data score over the monitored
    /// coordinates (`NaN` where excluded).
    pub mean_score: Vec<f64>,
    pub diagnostic: Option<String>,
}

/// Which monitored coordinates enter the information matrix.
struct Layout {
    p: usize,
    m: usize,
    beta_index: Vec<Option<usize>>,
    alpha_coords: Vec<usize>,
    alpha_index: Vec<Option<usize>>,
    k_ba: usize,
    lambda_offset: Vec<usize>,
    dim: usize,
}

fn layout(params: &ParameterVector, d: &Dataset) -> Layout {
    let m = params.n_types();
    let p = d.n_covariates();
    let mut beta_index = vec![None; m * p];
    let mut next = 0;
    for j in 0..m {
        if d.total_events(j) > 0 {
            for k in 0..p {
                beta_index[j * p + k] = Some(next);
                next += 1;
            }
        }
    }
    let n_cop = params.copula.n_params();
    let mut alpha_coords = Vec::new();
    let mut alpha_index = vec![None; m + n_cop];
    for j in 0..m {
        if d.total_events(j) > 0 {
            alpha_index[j] = Some(next);
            alpha_coords.push(j);
            next += 1;
        }
    }
    let copula_ok = m >= 2
        && match &params.copula {
            Copula::Clayton { param, .. } => param.alpha() >= CLAYTON_SE_MIN,
            Copula::Gaussian(_) => true,
        };
    if copula_ok {
        for c in 0..n_cop {
            alpha_index[m + c] = Some(next);
            alpha_coords.push(m + c);
            next += 1;
        }
    }
    let k_ba = next;
    let mut lambda_offset = Vec::with_capacity(m);
    for j in 0..m {
        lambda_offset.push(next);
        next += d.distinct_times(j).len();
    }
    Layout { p, m, beta_index, alpha_coords, alpha_index, k_ba, lambda_offset, dim: next }
}

/// Joint frailty law at `α` shifted by `delta` along the α-coordinates.
fn shifted_joint(family: MarginalFamily, params: &ParameterVector, coords: &[(usize, f64)]) -> Option<JointFrailty> {
    let m = params.n_types();
    let mut alphas = params.marginal_alphas.clone();
    let mut cop = params.copula.params();
    for &(c, h) in coords {
        if c < m {
            alphas[c] += h;
        } else {
            cop[c - m] += h;
        }
    }
    let margins = alphas.iter().map(|&a| Marginal::new(family, a)).collect::<Result<Vec<_>>>().ok()?;
    let copula = params.copula.with_params(&cop).ok()?;
    if let Copula::Clayton { param, .. } = &copula {
        if param.alpha() < CLAYTON_INDEPENDENCE && params.copula.params()[0] >= CLAYTON_INDEPENDENCE {
            return None;
        }
    }
    JointFrailty::new(margins, copula).ok()
}

/// Finite-difference stencil for the gradient and Hessian of `log g(b | α)`
/// in the included α-coordinates.
struct Stencil {
    center: JointFrailty,
    plus: Vec<JointFrailty>,
    minus: Vec<JointFrailty>,
    /// `(a, b, f(+a+b), f(−a−b))` for `a < b`.
    pairs: Vec<(usize, usize, JointFrailty, JointFrailty)>,
    h: Vec<f64>,
}

fn stencil(family: MarginalFamily, params: &ParameterVector, coords: &[usize]) -> Option<Stencil> {
    let all = params.monitored();
    let beta_len = all.len() - params.marginal_alphas.len() - params.copula.n_params();
    let h: Vec<f64> = coords.iter().map(|&c| 1e-3 * all[beta_len + c].abs().max(0.1)).collect();
    let center = params.joint(family).ok()?;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for (a, &c) in coords.iter().enumerate() {
        plus.push(shifted_joint(family, params, &[(c, h[a])])?);
        minus.push(shifted_joint(family, params, &[(c, -h[a])])?);
    }
    let mut pairs = Vec::new();
    for a in 0..coords.len() {
        for b in a + 1..coords.len() {
            let pp = shifted_joint(family, params, &[(coords[a], h[a]), (coords[b], h[b])])?;
            let mm = shifted_joint(family, params, &[(coords[a], -h[a]), (coords[b], -h[b])])?;
            pairs.push((a, b, pp, mm));
        }
    }
    Some(Stencil { center, plus, minus, pairs, h })
}

/// Per-subject Monte Carlo moments.
struct SubjectMoments {
    mean_z: DVector<f64>,
    cov_z: DMatrix<f64>,
    /// Average Hessian of `log g` in the α-coordinates.
    hess: DMatrix<f64>,
}

fn subject_moments(b: &[f64], m: usize, st: Option<&Stencil>, ka: usize) -> SubjectMoments {
    let nz = m + ka;
    let nq = b.len() / m;
    let mut sum = DVector::zeros(nz);
    let mut sum2 = DMatrix::zeros(nz, nz);
    let mut hess = DMatrix::zeros(ka, ka);
    let mut z = DVector::zeros(nz);
    for row in b.chunks_exact(m) {
        for j in 0..m {
            z[j] = row[j].exp();
        }
        if let Some(st) = st {
            let f0 = st.center.log_density_log_scale(row);
            let fp: Vec<f64> = st.plus.iter().map(|g| g.log_density_log_scale(row)).collect();
            let fm: Vec<f64> = st.minus.iter().map(|g| g.log_density_log_scale(row)).collect();
            for a in 0..ka {
                z[m + a] = (fp[a] - fm[a]) / (2.0 * st.h[a]);
                hess[(a, a)] += (fp[a] - 2.0 * f0 + fm[a]) / (st.h[a] * st.h[a]);
            }
            for (a, c, pp, mm) in &st.pairs {
                let fpp = pp.log_density_log_scale(row);
                let fmm = mm.log_density_log_scale(row);
                let v = (fpp - fp[*a] - fp[*c] + 2.0 * f0 - fm[*a] - fm[*c] + fmm) / (2.0 * st.h[*a] * st.h[*c]);
                hess[(*a, *c)] += v;
                hess[(*c, *a)] += v;
            }
        }
        sum += &z;
        sum2 += &z * z.transpose();
    }
    let nqf = nq as f64;
    let mean_z = sum / nqf;
    let cov_z = sum2 / nqf - &mean_z * mean_z.transpose();
    SubjectMoments { mean_z, cov_z, hess: hess / nqf }
}

/// Assembles the observed information at `params` from E-step draws taken
/// at `params`, and inverts it for the `(β, α)` standard errors.
pub fn louis_information(
    exec: Execution,
    params: &ParameterVector,
    family: MarginalFamily,
    draws: &FrailtyDraws,
    d: &Dataset,
    risk: &RiskSetIndex,
) -> Result<LouisInformation> {
    let lay = layout(params, d);
    let (m, p) = (lay.m, lay.p);
    let coords: Vec<usize> = lay.alpha_coords.clone();
    let ka = coords.len();
    let st = if ka > 0 { stencil(family, params, &coords) } else { None };
    let mut diagnostic = None;
    let (coords, ka, st) = match st {
        Some(s) => (coords, ka, Some(s)),
        None if ka > 0 => {
            diagnostic =
                Some("frailty-law derivatives undefined at the estimate; α standard errors withheld".to_string());
            (Vec::new(), 0, None)
        }
        None => (coords, ka, None),
    };
    let moments =
        parallel::map_range(exec, d.n_subjects(), |i| subject_moments(draws.log_frailties(i), m, st.as_ref(), ka));

    let dim = lay.dim;
    let mut info = DMatrix::zeros(dim, dim);
    let n_mon = params.monitored().len();
    let mut mean_score = vec![f64::NAN; n_mon];
    let alpha_row = |a: usize| lay.alpha_index[coords[a]].expect("included coordinate");
    let mut score = DVector::zeros(dim);

    for (i, s) in d.subjects().iter().enumerate() {
        let mo = &moments[i];
        let x = DVector::from_column_slice(&s.covariates);
        // loadings of z_i on the score: rows → (index, column of z, coefficient)
        let mut load: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..m {
            let e = s.linear_predictor(&params.beta[j]).exp();
            let r = risk.at_risk_count(j, i);
            let hz = params.baseline[j].cumulative_through(r) * e;
            let ew = mo.mean_z[j];
            for k in 0..p {
                if let Some(bk) = lay.beta_index[j * p + k] {
                    load.push((bk, j, -hz * x[k]));
                    score[bk] += s.n_events(j) as f64 * x[k] - hz * x[k] * ew;
                    for k2 in 0..p {
                        if let Some(bk2) = lay.beta_index[j * p + k2] {
                            info[(bk, bk2)] += hz * ew * x[k] * x[k2];
                        }
                    }
                    for l in 0..r {
                        let li = lay.lambda_offset[j] + l;
                        let v = ew * e * x[k];
                        info[(bk, li)] += v;
                        info[(li, bk)] += v;
                    }
                }
            }
            for l in 0..r {
                load.push((lay.lambda_offset[j] + l, j, -e));
                score[lay.lambda_offset[j] + l] -= ew * e;
            }
        }
        for a in 0..ka {
            let row = alpha_row(a);
            load.push((row, m + a, 1.0));
            score[row] += mo.mean_z[m + a];
            for b in 0..ka {
                info[(row, alpha_row(b))] -= mo.hess[(a, b)];
            }
        }
        // − A_i Cov(z_i) A_i'
        let c = &mo.cov_z;
        for &(r1, c1, v1) in &load {
            for &(r2, c2, v2) in &load {
                info[(r1, r2)] -= v1 * c[(c1, c2)] * v2;
            }
        }
    }
    for j in 0..m {
        for (l, (&nl, &jump)) in d.tie_counts(j).iter().zip(params.baseline[j].jumps()).enumerate() {
            let li = lay.lambda_offset[j] + l;
            info[(li, li)] += nl as f64 / (jump * jump);
            score[li] += nl as f64 / jump;
        }
    }
    for (mon, idx) in lay.beta_index.iter().chain(lay.alpha_index.iter()).enumerate() {
        if let Some(ix) = idx {
            mean_score[mon] = score[*ix];
        }
    }

    let mut std_errors = vec![None; n_mon];
    let covariance = invert_block(&info, lay.k_ba);
    match &covariance {
        Some(cov) => {
            for (mon, idx) in lay.beta_index.iter().chain(lay.alpha_index.iter()).enumerate() {
                if let Some(ix) = idx {
                    let v = cov[(*ix, *ix)];
                    if v > 0.0 {
                        std_errors[mon] = Some(v.sqrt());
                    }
                }
            }
        }
        None => {
            diagnostic = Some("observed information is not positive definite; standard errors withheld".to_string());
        }
    }
    Ok(LouisInformation { info, covariance, std_errors, mean_score, diagnostic })
}

/// Leading `k × k` block of the inverse, via a Jacobi-scaled Cholesky
/// factorization. `None` when the matrix is not positive definite.
fn invert_block(info: &DMatrix<f64>, k: usize) -> Option<DMatrix<f64>> {
    let n = info.nrows();
    let mut scale = DVector::zeros(n);
    for i in 0..n {
        let v = info[(i, i)];
        if !(v > 0.0) || !v.is_finite() {
            return None;
        }
        scale[i] = 1.0 / v.sqrt();
    }
    let mut scaled = info.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let scaled = (&scaled + scaled.transpose()) * 0.5;
    let ch = scaled.cholesky()?;
    // solve for the first k columns of the inverse only
    let mut rhs = DMatrix::zeros(n, k);
    for c in 0..k {
        rhs[(c, c)] = 1.0;
    }
    let sol = ch.solve(&rhs);
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            out[(a, b)] = sol[(a, b)] * scale[a] * scale[b];
        }
    }
    if (0..k).any(|a| !(out[(a, a)] > 0.0)) {
        return None;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_inverse_matches_full_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let full = a.clone().try_inverse().unwrap();
        let blk = invert_block(&a, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((blk[(i, j)] - full[(i, j)]).abs() < 1e-12);
            }
        }
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(invert_block(&bad, 1).is_none());
    }
}
