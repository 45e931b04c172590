//! Monte Carlo EM for copula-frailty intensity models.
//!
//! Each iteration samples every subject's frailty posterior, then updates
//! β by the expected partial likelihood, the baselines by the Breslow-type
//! estimator and the frailty law in two stages (margins, then copula).
//! Standard errors come from Louis's identity at the final estimate.

mod convergence;
mod louis;
mod mstep;
mod params;
mod report;

use std::collections::VecDeque;
use std::time::Instant;

use crate::copulas::{Copula, KendallTau};
use crate::error::{Error, Result};
use crate::event_data::{Dataset, RiskSetIndex};
use crate::frailty_posterior::{sample_posterior, ChainState, FrailtyDraws, JointFrailty, MHConfig};
use crate::parallel::Execution;

pub use convergence::{check_convergence, criterion_value, ConvergenceConfig, ConvergenceStatus};
pub use louis::{louis_information, LouisInformation, CLAYTON_SE_MIN};
pub use mstep::{
    expected_partial_loglik, update_alpha, update_baseline, update_baseline_type, update_beta, update_beta_type,
    TypeExpectations,
};
pub use params::{BaselineStep, ModelLabel, ParameterVector};
pub use report::{write_baselines_csv, write_report, write_trace_csv};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub mh: MHConfig,
    /// Burn-in for iterations after the first, whose chains start from the
    /// previous iteration's final state.
    pub warm_burn: usize,
    pub convergence: ConvergenceConfig,
    pub seed: u64,
    pub exec: Execution,
    /// Multiplier on `n_s` for the E-step that feeds the information matrix.
    pub se_sample_factor: usize,
    pub compute_se: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mh: MHConfig::default(),
            warm_burn: 100,
            convergence: ConvergenceConfig::default(),
            seed: 1,
            exec: Execution::default(),
            se_sample_factor: 4,
            compute_se: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Monitored coordinates after this iteration's M-step.
    pub params: Vec<f64>,
    pub criterion: f64,
    pub streak: usize,
    pub n_s: usize,
    pub mean_acceptance: f64,
    /// MC estimate of `Q(ξ_new) − Q(ξ_old)` on this iteration's draws, and
    /// its standard error.
    pub q_change: f64,
    pub q_change_se: f64,
    /// `q_change` fell more than three standard errors below zero.
    pub q_decrease: bool,
    pub copula_projected: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelLabel,
    pub params: ParameterVector,
    /// Names of the monitored coordinates (`β`, `α_j`, copula).
    pub names: Vec<String>,
    pub std_errors: Vec<Option<f64>>,
    pub information: Option<LouisInformation>,
    pub trace: Vec<IterationRecord>,
    pub kendall: KendallTau,
    pub converged: bool,
    pub n_iterations: usize,
    /// E-step draws at the final estimate (the ones used for the SEs).
    pub final_draws: FrailtyDraws,
    /// `E(w_ij)` (`[i][j]`) behind the final baseline update.
    pub mstep_e_w: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn estimates(&self) -> Vec<f64> {
        self.params.monitored()
    }
}

fn counts_matrix(d: &Dataset) -> Vec<Vec<f64>> {
    d.subjects().iter().map(|s| (0..d.n_types()).map(|j| s.n_events(j) as f64).collect()).collect()
}

/// Frailty-free starting values: Cox fits per type, Breslow baselines, unit
/// marginal variances and the independence copula.
pub fn initialize(exec: Execution, d: &Dataset, risk: &RiskSetIndex, model: ModelLabel) -> Result<ParameterVector> {
    let n = d.n_subjects();
    let m = d.n_types();
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let ex = vec![TypeExpectations { e_w: &ones, e_log_w: &zeros }; m];
    let beta = update_beta(exec, &ex, d, risk, &vec![vec![0.0; d.n_covariates()]; m])?;
    let baseline = update_baseline(&vec![ones.clone(); m], d, risk, &beta)?;
    Ok(ParameterVector {
        beta,
        baseline,
        marginal_alphas: vec![1.0; m],
        copula: Copula::independence(model.copula_family(), m),
    })
}

/// `Σ_i mean_q [ℓ_c(ξ_new; b_iq) − ℓ_c(ξ_old; b_iq)]` and its MC standard
/// error, treating each subject's draws as independent.
fn q_change(
    old: &ParameterVector,
    new: &ParameterVector,
    model: ModelLabel,
    draws: &FrailtyDraws,
    d: &Dataset,
) -> Result<(f64, f64)> {
    let family = model.marginal_family();
    let g_old = old.joint(family)?;
    let g_new = new.joint(family)?;
    let h_old = old.subject_hazards(d);
    let h_new = new.subject_hazards(d);
    let m = d.n_types();
    let mut total = 0.0;
    let mut var = 0.0;
    // event-time log-jumps do not involve the frailty
    for j in 0..m {
        for (l, &nl) in d.tie_counts(j).iter().enumerate() {
            total += nl as f64 * (new.baseline[j].jumps()[l].ln() - old.baseline[j].jumps()[l].ln());
        }
    }
    for (i, s) in d.subjects().iter().enumerate() {
        let mut fixed = 0.0;
        for j in 0..m {
            fixed += s.n_events(j) as f64 * (s.linear_predictor(&new.beta[j]) - s.linear_predictor(&old.beta[j]));
        }
        let b = draws.log_frailties(i);
        let nq = b.len() / m;
        let (mut s1, mut s2) = (0.0, 0.0);
        for row in b.chunks_exact(m) {
            let mut v = fixed + g_new.log_density_log_scale(row) - g_old.log_density_log_scale(row);
            for j in 0..m {
                v -= (h_new[i][j] - h_old[i][j]) * row[j].exp();
            }
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / nq as f64;
        total += mean;
        var += (s2 / nq as f64 - mean * mean).max(0.0) / nq as f64;
    }
    Ok((total, var.sqrt()))
}

fn fit_error(stage: &'static str, iteration: usize, source: Error, trace: &[IterationRecord]) -> Error {
    Error::Fit { stage, iteration, source: Box::new(source), trace: trace.to_vec() }
}

/// Runs MCEM to convergence (or `max_iter`) and computes Louis standard
/// errors at the estimate.
pub fn fit(d: &Dataset, model: ModelLabel, cfg: &FitConfig) -> Result<FitResult> {
    cfg.mh.validate()?;
    cfg.convergence.validate()?;
    if cfg.se_sample_factor == 0 {
        return Err(Error::Config("se_sample_factor must be at least 1".into()));
    }
    let exec = cfg.exec;
    let family = model.marginal_family();
    let m = d.n_types();
    let n = d.n_subjects();
    let risk = RiskSetIndex::build(d);
    let counts = counts_matrix(d);
    let mut params = initialize(exec, d, &risk, model).map_err(|e| fit_error("initialization", 0, e, &[]))?;
    let mut chains = ChainState::for_subjects(n, m, cfg.mh.step_scale, cfg.seed);
    let mut history = vec![params.monitored()];
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut status = ConvergenceStatus { converged: false, streak: 0, last_value: f64::NAN };
    let block = cfg.convergence.block;
    let mut recent: VecDeque<ParameterVector> = VecDeque::with_capacity(block);

    for it in 1..=cfg.convergence.max_iter {
        let start = Instant::now();
        let mh = MHConfig { n_burn: if it == 1 { cfg.mh.n_burn } else { cfg.warm_burn }, ..cfg.mh };
        let joint = params.joint(family).map_err(|e| fit_error("E-step", it, e, &trace))?;
        let hazards = params.subject_hazards(d);
        let draws = sample_posterior(exec, &joint, &counts, &hazards, &mut chains, &mh)
            .map_err(|e| fit_error("E-step", it, e, &trace))?;

        let e_w = draws.e_w_by_type();
        let e_log_w = draws.e_log_w_by_type();
        let ex: Vec<TypeExpectations<'_>> =
            (0..m).map(|j| TypeExpectations { e_w: &e_w[j], e_log_w: &e_log_w[j] }).collect();
        let beta =
            update_beta(exec, &ex, d, &risk, &params.beta).map_err(|e| fit_error("beta update", it, e, &trace))?;
        let baseline =
            update_baseline(&e_w, d, &risk, &beta).map_err(|e| fit_error("baseline update", it, e, &trace))?;
        let (alphas, cop) =
            update_alpha(exec, &draws, family, &params.copula).map_err(|e| fit_error("alpha update", it, e, &trace))?;
        let new = ParameterVector { beta, baseline, marginal_alphas: alphas, copula: cop.copula };
        let (dq, dq_se) =
            q_change(&params, &new, model, &draws, d).map_err(|e| fit_error("M-step check", it, e, &trace))?;
        params = new;
        if recent.len() == block {
            recent.pop_front();
        }
        recent.push_back(params.clone());
        history.push(params.monitored());
        status = check_convergence(&history, &cfg.convergence);
        let q_decrease = dq < -3.0 * dq_se;
        if q_decrease {
            warnings.push(format!("iteration {it}: Q decreased by {:.4} (MC SE {:.4})", -dq, dq_se));
        }
        if cop.projected {
            warnings.push(format!("iteration {it}: copula correlation matrix projected to positive definite"));
        }
        let acc = draws.acceptance_rate.iter().sum::<f64>() / n.max(1) as f64;
        let low = draws.acceptance_warnings();
        if !low.is_empty() {
            warnings.push(format!("iteration {it}: {} subject chains with acceptance outside [0.05, 0.95]", low.len()));
        }
        trace.push(IterationRecord {
            iteration: it,
            params: params.monitored(),
            criterion: status.last_value,
            streak: status.streak,
            n_s: mh.n_s,
            mean_acceptance: acc,
            q_change: dq,
            q_change_se: dq_se,
            q_decrease,
            copula_projected: cop.projected,
            seconds: start.elapsed().as_secs_f64(),
        });
        if status.converged {
            break;
        }
    }

    let n_iterations = trace.len();
    let stage_err = |stage: &'static str| {
        let trace = &trace;
        move |e: Error| fit_error(stage, n_iterations, e, trace)
    };
    // the estimate is the mean of the last block of iterates; its baseline
    // is refitted from the final E-step so the Breslow identity holds there
    let averaged = ParameterVector::average(recent.make_contiguous()).map_err(stage_err("averaging"))?;
    let joint: JointFrailty = averaged.joint(family).map_err(stage_err("final E-step"))?;
    let final_mh = MHConfig { n_burn: cfg.warm_burn, n_s: cfg.mh.n_s * cfg.se_sample_factor, ..cfg.mh };
    let final_draws = sample_posterior(exec, &joint, &counts, &averaged.subject_hazards(d), &mut chains, &final_mh)
        .map_err(stage_err("final E-step"))?;
    let mstep_e_w = final_draws.e_w.clone();
    let baseline =
        update_baseline(&final_draws.e_w_by_type(), d, &risk, &averaged.beta).map_err(stage_err("final baseline"))?;
    let params = ParameterVector { baseline, ..averaged };
    let n_mon = params.monitored().len();
    let (information, std_errors) = if cfg.compute_se {
        let info = louis_information(exec, &params, family, &final_draws, d, &risk)
            .map_err(stage_err("information matrix"))?;
        if let Some(msg) = &info.diagnostic {
            warnings.push(msg.clone());
        }
        let se = info.std_errors.clone();
        (Some(info), se)
    } else {
        (None, vec![None; n_mon])
    };
    Ok(FitResult {
        model,
        names: params.monitored_names(d.covariate_names()),
        kendall: params.copula.kendall_tau(),
        params,
        std_errors,
        information,
        trace,
        converged: status.converged,
        n_iterations,
        final_draws,
        mstep_e_w,
        warnings,
    })
}
