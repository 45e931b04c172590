//! M-step updates: expected partial likelihood for β, Breslow-type baseline,
//! and the two-stage marginal/copula update.

use nalgebra::{DMatrix, DVector};

use crate::copulas::{maximize_q3, Copula, CopulaDraws, CopulaEstimate};
use crate::error::{Error, Result};
use crate::event_data::{Dataset, RiskSetIndex};
use crate::frailty_posterior::FrailtyDraws;
use crate::marginals::{maximize_q4, MarginStats, Marginal, MarginalFamily};
use crate::parallel::{self, Execution};

use super::params::BaselineStep;

const NEWTON_GRAD_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;
/// Consecutive full Newton steps of at least this size signal a likelihood
/// that keeps increasing along a ray (separated data).
const DIVERGENT_STEP: f64 = 0.5;
const DIVERGENT_RUN: usize = 10;

/// Per-subject `E(w_ij)` and `E(log w_ij)` for one event type.
#[derive(Debug, Clone, Copy)]
pub struct TypeExpectations<'a> {
    pub e_w: &'a [f64],
    pub e_log_w: &'a [f64],
}

/// Risk-set sums `S0 = Σ E(w) e^{x'β}`, `S1 = Σ E(w) e^{x'β} x` and
/// `S2 = Σ E(w) e^{x'β} x x'` at every distinct type-`j` time.
struct RiskSums {
    s0: Vec<f64>,
    s1: Vec<DVector<f64>>,
    s2: Vec<DMatrix<f64>>,
}

fn risk_sums(d: &Dataset, risk: &RiskSetIndex, j: usize, beta: &[f64], e_w: &[f64], second: bool) -> RiskSums {
    let p = beta.len();
    let order = risk.order();
    let n = order.len();
    // prefix sums along decreasing censoring time; risk sets are prefixes
    let mut p0 = Vec::with_capacity(n + 1);
    let mut p1 = Vec::with_capacity(n + 1);
    let mut p2 = Vec::with_capacity(if second { n + 1 } else { 0 });
    let (mut a0, mut a1, mut a2) = (0.0, DVector::zeros(p), DMatrix::zeros(p, p));
    p0.push(a0);
    p1.push(a1.clone());
    if second {
        p2.push(a2.clone());
    }
    for &i in order {
        let s = &d.subjects()[i];
        let x = DVector::from_column_slice(&s.covariates);
        let r = e_w[i] * s.linear_predictor(beta).exp();
        a0 += r;
        a1 += &x * r;
        p0.push(a0);
        p1.push(a1.clone());
        if second {
            a2 += &x * x.transpose() * r;
            p2.push(a2.clone());
        }
    }
    let k = d.distinct_times(j).len();
    let mut out = RiskSums { s0: Vec::with_capacity(k), s1: Vec::with_capacity(k), s2: Vec::with_capacity(k) };
    for l in 0..k {
        let sz = risk.size(j, l);
        out.s0.push(p0[sz]);
        out.s1.push(p1[sz].clone());
        if second {
            out.s2.push(p2[sz].clone());
        }
    }
    out
}

/// Expected partial log-likelihood of type `j` with Breslow ties:
/// `Σ_events (x_i'β_j + E log w_ij) − Σ_l N_jl log Σ_{R_l} E(w_ij) e^{x_i'β_j}`.
pub fn expected_partial_loglik(
    beta_j: &[f64],
    ex: TypeExpectations<'_>,
    d: &Dataset,
    risk: &RiskSetIndex,
    j: usize,
) -> Result<f64> {
    let sums = risk_sums(d, risk, j, beta_j, ex.e_w, false);
    partial_value(beta_j, ex, d, j, &sums)
}

fn partial_value(beta: &[f64], ex: TypeExpectations<'_>, d: &Dataset, j: usize, sums: &RiskSums) -> Result<f64> {
    let mut v = 0.0;
    for (i, s) in d.subjects().iter().enumerate() {
        let n = s.n_events(j);
        if n > 0 {
            v += n as f64 * (s.linear_predictor(beta) + ex.e_log_w[i]);
        }
    }
    for (l, &nl) in d.tie_counts(j).iter().enumerate() {
        let s0 = sums.s0[l];
        if !(s0 > 0.0) {
            return Err(Error::Data(format!("empty risk set at type {} time {}", j + 1, d.distinct_times(j)[l])));
        }
        v -= nl as f64 * s0.ln();
    }
    Ok(v)
}

fn partial_derivs(
    beta: &[f64],
    ex: TypeExpectations<'_>,
    d: &Dataset,
    risk: &RiskSetIndex,
    j: usize,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let p = beta.len();
    let sums = risk_sums(d, risk, j, beta, ex.e_w, true);
    let v = partial_value(beta, ex, d, j, &sums)?;
    let mut g = DVector::zeros(p);
    for s in d.subjects() {
        let n = s.n_events(j);
        if n > 0 {
            g += DVector::from_column_slice(&s.covariates) * n as f64;
        }
    }
    let mut h = DMatrix::zeros(p, p);
    for (l, &nl) in d.tie_counts(j).iter().enumerate() {
        let s0 = sums.s0[l];
        let mean = &sums.s1[l] / s0;
        g -= &mean * nl as f64;
        h -= (&sums.s2[l] / s0 - &mean * mean.transpose()) * nl as f64;
    }
    Ok((v, g, h))
}

/// Newton–Raphson with step halving on the expected partial likelihood of
/// one event type. Types without events keep `β_j = 0`.
pub fn update_beta_type(
    ex: TypeExpectations<'_>,
    d: &Dataset,
    risk: &RiskSetIndex,
    j: usize,
    init: &[f64],
) -> Result<Vec<f64>> {
    let p = d.n_covariates();
    if d.total_events(j) == 0 || p == 0 {
        return Ok(vec![0.0; p]);
    }
    let names = d.covariate_names();
    let mut beta = DVector::from_column_slice(init);
    let (mut f, mut g, mut h) = partial_derivs(beta.as_slice(), ex, d, risk, j)?;
    let mut divergent_run = 0;
    for _ in 0..NEWTON_MAX_ITER {
        let neg_h = -&h;
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                let k = (0..p).min_by(|&a, &b| neg_h[(a, a)].total_cmp(&neg_h[(b, b)])).unwrap_or(0);
                let what = if neg_h[(k, k)] <= 1e-12 * (1.0 + neg_h.amax()) {
                    format!("covariate {:?} has no variation within the risk sets", names[k])
                } else {
                    "covariates are collinear within the risk sets".to_string()
                };
                return Err(Error::Estimation {
                    event_type: j + 1,
                    message: format!("singular partial-likelihood Hessian: {what}"),
                });
            }
        };
        if g.amax() < NEWTON_GRAD_TOL {
            return Ok(beta.as_slice().to_vec());
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let (fc, gc, hc) = partial_derivs(cand.as_slice(), ex, d, risk, j)?;
            if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                accepted = Some((cand, fc, gc, hc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc, hc)) = accepted else {
            if g.amax() < 1e-6 {
                return Ok(beta.as_slice().to_vec());
            }
            return Err(Error::Estimation {
                event_type: j + 1,
                message: "step halving failed to improve the partial likelihood".into(),
            });
        };
        if t == 1.0 && step.amax() > DIVERGENT_STEP {
            divergent_run += 1;
            if divergent_run >= DIVERGENT_RUN {
                let k = step.iamax();
                return Err(Error::Estimation {
                    event_type: j + 1,
                    message: format!(
                        "covariate {:?} separates the events; the partial likelihood has no maximum",
                        names[k]
                    ),
                });
            }
        } else {
            divergent_run = 0;
        }
        beta = cand;
        f = fc;
        g = gc;
        h = hc;
    }
    if g.amax() < NEWTON_GRAD_TOL * 1e3 {
        return Ok(beta.as_slice().to_vec());
    }
    Err(Error::Estimation {
        event_type: j + 1,
        message: format!("Newton iteration did not converge in {NEWTON_MAX_ITER} steps"),
    })
}

/// `β` update for all types; the objective separates by type, so types are
/// solved independently (in parallel when enabled).
pub fn update_beta(
    exec: Execution,
    expectations: &[TypeExpectations<'_>],
    d: &Dataset,
    risk: &RiskSetIndex,
    init: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    parallel::map_range(exec, d.n_types(), |j| update_beta_type(expectations[j], d, risk, j, &init[j]))
        .into_iter()
        .collect()
}

/// Breslow-type jumps `N_jl / Σ_{R_l} E(w_ij) e^{x_i'β_j}`.
pub fn update_baseline_type(
    e_w: &[f64],
    d: &Dataset,
    risk: &RiskSetIndex,
    j: usize,
    beta_j: &[f64],
) -> Result<BaselineStep> {
    let sums = risk_sums(d, risk, j, beta_j, e_w, false);
    let jumps = d.tie_counts(j).iter().zip(&sums.s0).map(|(&n, &s0)| n as f64 / s0).collect();
    BaselineStep::new(d.distinct_times(j).to_vec(), jumps)
}

pub fn update_baseline(
    e_w: &[Vec<f64>],
    d: &Dataset,
    risk: &RiskSetIndex,
    beta: &[Vec<f64>],
) -> Result<Vec<BaselineStep>> {
    (0..d.n_types()).map(|j| update_baseline_type(&e_w[j], d, risk, j, &beta[j])).collect()
}

/// Two-stage update: each marginal variance from its own `Q4`, then the
/// copula from `Q3` with the margins fixed at the new values.
pub fn update_alpha(
    exec: Execution,
    draws: &FrailtyDraws,
    family: MarginalFamily,
    current: &Copula,
) -> Result<(Vec<f64>, CopulaEstimate)> {
    let e_w = draws.e_w_by_type();
    let e_log_w = draws.e_log_w_by_type();
    let e_b2 = draws.e_b2_by_type();
    let alphas = (0..draws.dim())
        .map(|j| maximize_q4(family, MarginStats { e_w: &e_w[j], e_log_w: &e_log_w[j], e_b2: &e_b2[j] }))
        .collect::<Result<Vec<_>>>()?;
    let margins = alphas.iter().map(|&a| Marginal::new(family, a)).collect::<Result<Vec<_>>>()?;
    let cd = CopulaDraws::from_log_frailties(exec, draws.all_log_frailties(), &margins);
    let est = maximize_q3(&cd, current, exec)?;
    Ok((alphas, est))
}
