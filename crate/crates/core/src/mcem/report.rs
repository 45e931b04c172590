use std::io::Write;

use crate::copulas::KendallTau;
use crate::diagnostics::{relative_risk, ResidualReport};
use crate::event_data::Dataset;

use super::{FitResult, ParameterVector};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

/// Structured text report: header, parameter table, Kendall's tau,
/// deviance summary and warnings, in `[section]` blocks.
pub fn write_report<W: Write>(
    fit: &FitResult,
    d: &Dataset,
    residuals: Option<&ResidualReport>,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "model = {}", fit.model)?;
    writeln!(out, "converged = {}", fit.converged)?;
    writeln!(out, "iterations = {}", fit.n_iterations)?;
    writeln!(out, "subjects = {}", d.n_subjects())?;
    writeln!(out, "event_types = {}", d.type_labels().join(","))?;
    writeln!(out, "covariates = {}", d.covariate_names().join(","))?;
    writeln!(out)?;
    writeln!(out, "[parameters]")?;
    writeln!(out, "name,estimate,se,rr,rr_lower,rr_upper,p_value")?;
    let est = fit.estimates();
    let n_beta: usize = fit.params.beta.iter().map(Vec::len).sum();
    for (k, name) in fit.names.iter().enumerate() {
        if k < n_beta {
            let rr = relative_risk(name.clone(), est[k], fit.std_errors[k]);
            writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                est[k],
                opt(rr.se),
                rr.rr,
                opt(rr.ci.map(|c| c.0)),
                opt(rr.ci.map(|c| c.1)),
                opt(rr.p_value)
            )?;
        } else {
            writeln!(out, "{name},{},{},NA,NA,NA,NA", est[k], opt(fit.std_errors[k]))?;
        }
    }
    writeln!(out)?;
    writeln!(out, "[kendall]")?;
    match &fit.kendall {
        KendallTau::Scalar(t) => writeln!(out, "tau = {t}")?,
        KendallTau::Pairwise(t) => {
            for a in 0..t.nrows() {
                for b in a + 1..t.ncols() {
                    writeln!(out, "tau_{}{} = {}", a + 1, b + 1, t[(a, b)])?;
                }
            }
        }
    }
    if let Some(r) = residuals {
        writeln!(out)?;
        writeln!(out, "[deviance]")?;
        for (j, s) in r.sum_sq_by_type.iter().enumerate() {
            writeln!(out, "{} = {s}", d.type_labels()[j])?;
        }
        writeln!(out, "total = {}", r.total)?;
    }
    writeln!(out)?;
    writeln!(out, "[warnings]")?;
    for w in &fit.warnings {
        writeln!(out, "{w}")?;
    }
    Ok(())
}

/// `event_type,time,jump,cumulative` for every baseline step.
pub fn write_baselines_csv<W: Write>(params: &ParameterVector, labels: &[String], mut out: W) -> std::io::Result<()> {
    writeln!(out, "event_type,time,jump,cumulative")?;
    for (j, b) in params.baseline.iter().enumerate() {
        for ((t, jump), cum) in b.times().iter().zip(b.jumps()).zip(b.cumulative_values()) {
            writeln!(out, "{},{t},{jump},{cum}", labels[j])?;
        }
    }
    Ok(())
}

/// One row per MCEM iteration: diagnostics followed by the monitored
/// parameters.
pub fn write_trace_csv<W: Write>(fit: &FitResult, mut out: W) -> std::io::Result<()> {
    write!(
        out,
        "iteration,n_s,criterion,streak,mean_acceptance,q_change,q_change_se,q_decrease,copula_projected,seconds"
    )?;
    for n in &fit.names {
        write!(out, ",{n}")?;
    }
    writeln!(out)?;
    for r in &fit.trace {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.n_s,
            r.criterion,
            r.streak,
            r.mean_acceptance,
            r.q_change,
            r.q_change_se,
            r.q_decrease,
            r.copula_projected,
            r.seconds
        )?;
        for v in &r.params {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
