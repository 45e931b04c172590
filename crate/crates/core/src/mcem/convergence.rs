//! Stopping rule for MCEM.
//!
//! The relative-change rule `max_d |Δξ_d / (ξ_d − δ1)| < δ2` is applied
//! either to consecutive iterates (`block = 1`) or to the means of the last
//! two blocks of `block` iterates. In block mode a coordinate also counts as
//! settled when the least-squares trend over those `2·block` iterates is
//! within `drift_z` standard errors of zero, since coordinates near zero
//! otherwise need changes far below the per-iteration sampling noise. The
//! standard error carries an AR(1) inflation because EM iterates inherit
//! Monte Carlo noise from their predecessors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub consecutive_required: usize,
    pub max_iter: usize,
    /// Iterates per block; 1 applies the rule to consecutive iterates.
    pub block: usize,
    pub drift_z: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            delta1: 0.01,
            delta2: 0.003,
            consecutive_required: 3,
            max_iter: 300,
            block: 10,
            drift_z: 3.0,
        }
    }
}

impl ConvergenceConfig {
    /// The rule on consecutive iterates, without block averaging.
    pub fn consecutive() -> Self {
        ConvergenceConfig { block: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta1 > 0.0) || !(self.delta2 > 0.0) {
            return Err(Error::Config("delta1 and delta2 must be positive".into()));
        }
        if self.consecutive_required == 0 || self.max_iter == 0 || self.block == 0 {
            return Err(Error::Config("consecutive_required, max_iter and block must be at least 1".into()));
        }
        if !(self.drift_z >= 0.0) {
            return Err(Error::Config("drift_z must be non-negative".into()));
        }
        Ok(())
    }
}

/// `max_d |(ξ_d^(s+1) − ξ_d^(s)) / (ξ_d^(s) − δ1)|` over the monitored
/// coordinates.
pub fn criterion_value(prev: &[f64], next: &[f64], delta1: f64) -> f64 {
    prev.iter().zip(next).map(|(a, b)| ((b - a) / (a - delta1)).abs()).fold(0.0, f64::max)
}

/// Outcome of applying the stopping rule to a trace of monitored iterates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceStatus {
    pub converged: bool,
    /// Trailing run of iterations meeting the threshold.
    pub streak: usize,
    /// Criterion value at the last transition (`NaN` before enough iterates).
    pub last_value: f64,
}

/// Cap on the residual lag-one autocorrelation used for the inflation.
const AR_MAX: f64 = 0.8;

fn mean(rows: &[Vec<f64>], d: usize) -> f64 {
    rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64
}

/// Least-squares slope of coordinate `d` against iteration and its
/// autocorrelation-inflated standard error.
fn trend(rows: &[Vec<f64>], d: usize) -> (f64, f64) {
    let n = rows.len();
    let tbar = (n as f64 - 1.0) / 2.0;
    let ybar = mean(rows, d);
    let sxx: f64 = (0..n).map(|t| (t as f64 - tbar).powi(2)).sum();
    let sxy: f64 = rows.iter().enumerate().map(|(t, r)| (t as f64 - tbar) * (r[d] - ybar)).sum();
    let slope = sxy / sxx;
    let resid: Vec<f64> = rows.iter().enumerate().map(|(t, r)| r[d] - ybar - slope * (t as f64 - tbar)).collect();
    let ss: f64 = resid.iter().map(|e| e * e).sum();
    let lag: f64 = resid.windows(2).map(|w| w[0] * w[1]).sum();
    let r = if ss > 0.0 { (lag / ss).clamp(0.0, AR_MAX) } else { 0.0 };
    let var = ss / (n as f64 - 2.0) / sxx * (1.0 + r) / (1.0 - r);
    (slope, var.sqrt())
}

/// Block-mode test ending at `end`: criterion value on the block means and
/// whether every coordinate is settled.
fn block_step(trace: &[Vec<f64>], end: usize, cfg: &ConvergenceConfig) -> (f64, bool) {
    let k = cfg.block;
    let old = &trace[end - 2 * k..end - k];
    let new = &trace[end - k..end];
    let mut worst = 0.0_f64;
    let mut settled = true;
    for d in 0..trace[end - 1].len() {
        let (ma, mb) = (mean(old, d), mean(new, d));
        let rel = ((mb - ma) / (ma - cfg.delta1)).abs();
        worst = worst.max(rel);
        let (slope, se) = trend(&trace[end - 2 * k..end], d);
        if !(rel < cfg.delta2 || slope.abs() <= cfg.drift_z * se) {
            settled = false;
        }
    }
    (worst, settled)
}

/// Applies the rule to iterates `ξ^(0), ξ^(1), …`: converged once it holds
/// for `consecutive_required` transitions in a row.
pub fn check_convergence(trace: &[Vec<f64>], cfg: &ConvergenceConfig) -> ConvergenceStatus {
    let mut streak = 0;
    let mut last_value = f64::NAN;
    if cfg.block <= 1 {
        for w in trace.windows(2) {
            last_value = criterion_value(&w[0], &w[1], cfg.delta1);
            streak = if last_value < cfg.delta2 { streak + 1 } else { 0 };
        }
    } else {
        for end in 2 * cfg.block..=trace.len() {
            let (v, ok) = block_step(trace, end, cfg);
            last_value = v;
            streak = if ok { streak + 1 } else { 0 };
        }
    }
    ConvergenceStatus { converged: streak >= cfg.consecutive_required, streak, last_value }
}
