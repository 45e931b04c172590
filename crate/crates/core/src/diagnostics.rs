//! Post-fit diagnostics: martingale and deviance residuals, cumulative
//! baseline curves, and relative risks with Wald intervals.

use std::io::Write;

use crate::error::{Error, Result};
use crate::event_data::Dataset;
use crate::mcem::{FitResult, ParameterVector};
use crate::special::two_sided_normal_p;

const Z_975: f64 = 1.959_963_984_540_054;

/// Deviance residual for `n` observed events and expected count `n − M`.
pub fn deviance_residual(n: f64, martingale: f64) -> Result<f64> {
    let expected = n - martingale;
    let inner = if n == 0.0 {
        martingale
    } else {
        if !(expected > 0.0) {
            return Err(Error::domain(format!("expected count {expected} must be positive when events were observed")));
        }
        martingale + n * (expected / n).ln()
    };
    if martingale == 0.0 {
        return Ok(0.0);
    }
    Ok(martingale.signum() * (-2.0 * inner).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `[i][j]` martingale residual `n_ij − Λ0j(τ_i) E(w_ij) e^{x_i'β_j}`.
    pub martingale: Vec<Vec<f64>>,
    pub deviance: Vec<Vec<f64>>,
    pub sum_sq_by_type: Vec<f64>,
    pub total: f64,
}

/// Residuals at `params` conditioning on posterior mean frailties
/// `e_w[i][j]`.
pub fn residuals(params: &ParameterVector, e_w: &[Vec<f64>], d: &Dataset) -> Result<ResidualReport> {
    let m = d.n_types();
    let mut martingale = Vec::with_capacity(d.n_subjects());
    let mut deviance = Vec::with_capacity(d.n_subjects());
    let mut sum_sq = vec![0.0; m];
    for (i, s) in d.subjects().iter().enumerate() {
        let mut mr = Vec::with_capacity(m);
        let mut dr = Vec::with_capacity(m);
        for j in 0..m {
            let n = s.n_events(j) as f64;
            let expected =
                params.baseline[j].cumulative(s.censoring_time) * e_w[i][j] * s.linear_predictor(&params.beta[j]).exp();
            let mres = n - expected;
            let dres = deviance_residual(n, mres)?;
            sum_sq[j] += dres * dres;
            mr.push(mres);
            dr.push(dres);
        }
        martingale.push(mr);
        deviance.push(dr);
    }
    let total = sum_sq.iter().sum();
    Ok(ResidualReport { martingale, deviance, sum_sq_by_type: sum_sq, total })
}

/// Residuals of a fit, using the posterior means that produced its final
/// baseline update.
pub fn deviance_residuals(fit: &FitResult, d: &Dataset) -> Result<ResidualReport> {
    residuals(&fit.params, &fit.mstep_e_w, d)
}

impl ResidualReport {
    /// `subject_id,event_type,events,martingale,deviance`.
    pub fn write_csv<W: Write>(&self, d: &Dataset, mut out: W) -> std::io::Result<()> {
        writeln!(out, "subject_id,event_type,events,martingale,deviance")?;
        for (i, s) in d.subjects().iter().enumerate() {
            for j in 0..d.n_types() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.id,
                    d.type_labels()[j],
                    s.n_events(j),
                    self.martingale[i][j],
                    self.deviance[i][j]
                )?;
            }
        }
        Ok(())
    }
}

/// `(t, Λ0j(t))` on `grid` for every type, optionally multiplied by
/// `exp(x'β_j)` for the covariate profile `x`.
pub fn export_cumulative_intensity(
    params: &ParameterVector,
    grid: &[f64],
    profile: Option<&[f64]>,
) -> Vec<Vec<(f64, f64)>> {
    params
        .baseline
        .iter()
        .zip(&params.beta)
        .map(|(b, beta)| {
            let rr = profile.map_or(1.0, |x| x.iter().zip(beta).map(|(a, c)| a * c).sum::<f64>().exp());
            grid.iter().map(|&t| (t, b.cumulative(t) * rr)).collect()
        })
        .collect()
}

/// `event_type,time,cumulative` rows of an exported curve table.
pub fn write_curves_csv<W: Write>(curves: &[Vec<(f64, f64)>], labels: &[String], mut out: W) -> std::io::Result<()> {
    writeln!(out, "event_type,time,cumulative")?;
    for (j, c) in curves.iter().enumerate() {
        for (t, v) in c {
            writeln!(out, "{},{},{}", labels[j], t, v)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeRisk {
    pub name: String,
    pub beta: f64,
    pub se: Option<f64>,
    pub rr: f64,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
}

/// `exp(β)`, with a 95% Wald interval and two-sided p-value when an SE is
/// available.
pub fn relative_risk(name: impl Into<String>, beta: f64, se: Option<f64>) -> RelativeRisk {
    let se = se.filter(|s| *s > 0.0 && s.is_finite());
    RelativeRisk {
        name: name.into(),
        beta,
        se,
        rr: beta.exp(),
        ci: se.map(|s| ((beta - Z_975 * s).exp(), (beta + Z_975 * s).exp())),
        p_value: se.map(|s| two_sided_normal_p(beta / s)),
    }
}

/// Relative risks for every regression coefficient of a fit.
pub fn relative_risks(fit: &FitResult) -> Vec<RelativeRisk> {
    let n_beta: usize = fit.params.beta.iter().map(Vec::len).sum();
    (0..n_beta).map(|k| relative_risk(fit.names[k].clone(), fit.estimates()[k], fit.std_errors[k])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copulas::Copula;
    use crate::event_data::SubjectData;
    use crate::mcem::BaselineStep;
    use approx::assert_relative_eq;

    #[test]
    fn zero_count_branch() {
        let d = deviance_residual(0.0, -0.8).unwrap();
        assert_relative_eq!(d, -(2.0_f64 * 0.8).sqrt(), epsilon = 1e-15);
        assert_eq!(deviance_residual(3.0, 0.0).unwrap(), 0.0);
        assert!(deviance_residual(2.0, 2.0).is_err());
    }

    #[test]
    fn three_subject_hand_evaluation() {
        let d = Dataset::new(
            vec![
                SubjectData {
                    id: "1".into(),
                    covariates: vec![1.0],
                    censoring_time: 2.0,
                    events: vec![vec![0.5, 1.5]],
                },
                SubjectData { id: "2".into(), covariates: vec![0.0], censoring_time: 1.0, events: vec![vec![0.5]] },
                SubjectData { id: "3".into(), covariates: vec![0.0], censoring_time: 0.4, events: vec![vec![]] },
            ],
            vec!["a".into()],
            vec!["x".into()],
        )
        .unwrap();
        let params = ParameterVector {
            beta: vec![vec![0.5]],
            baseline: vec![BaselineStep::new(vec![0.5, 1.5], vec![0.4, 0.3]).unwrap()],
            marginal_alphas: vec![1.0],
            copula: Copula::clayton(1, 0.0).unwrap(),
        };
        let e_w = vec![vec![1.2], vec![0.9], vec![1.0]];
        let r = residuals(&params, &e_w, &d).unwrap();
        let mu1 = 0.7 * 1.2 * 0.5_f64.exp();
        let mu2: f64 = 0.4 * 0.9;
        let m1 = 2.0 - mu1;
        let m2 = 1.0 - mu2;
        let d1 = m1.signum() * (-2.0 * (m1 + 2.0 * (mu1 / 2.0).ln())).sqrt();
        let d2 = m2.signum() * (-2.0 * (m2 + (mu2 / 1.0).ln())).sqrt();
        assert_relative_eq!(r.martingale[0][0], m1, epsilon = 1e-14);
        assert_relative_eq!(r.deviance[0][0], d1, epsilon = 1e-12);
        assert_relative_eq!(r.deviance[1][0], d2, epsilon = 1e-12);
        assert_eq!(r.martingale[2][0], 0.0);
        assert_eq!(r.deviance[2][0], 0.0);
        assert_relative_eq!(r.total, d1 * d1 + d2 * d2, epsilon = 1e-12);
        for (mr, dr) in r.martingale.iter().zip(&r.deviance) {
            assert!(mr[0] * dr[0] >= 0.0);
        }
    }

    #[test]
    fn curves_step_and_saturate() {
        let params = ParameterVector {
            beta: vec![vec![0.2]],
            baseline: vec![BaselineStep::new(vec![1.0, 2.0], vec![0.5, 0.25]).unwrap()],
            marginal_alphas: vec![1.0],
            copula: Copula::clayton(1, 0.0).unwrap(),
        };
        let c = export_cumulative_intensity(&params, &[0.0, 0.5, 1.0, 1.5, 2.0, 9.0], None);
        let v: Vec<f64> = c[0].iter().map(|p| p.1).collect();
        assert_eq!(v, vec![0.0, 0.0, 0.5, 0.5, 0.75, 0.75]);
        let c = export_cumulative_intensity(&params, &[9.0], Some(&[1.0]));
        assert_relative_eq!(c[0][0].1, 0.75 * 0.2_f64.exp(), epsilon = 1e-15);
    }

    #[test]
    fn relative_risk_arithmetic() {
        let r = relative_risk("b", 0.0, Some(0.3));
        assert_eq!(r.rr, 1.0);
        assert_eq!(r.p_value, Some(1.0));
        let r = relative_risk("b", 0.085, None);
        assert!((r.rr - 1.0887).abs() < 5e-5);
        assert!(r.ci.is_none() && r.p_value.is_none());
        let r = relative_risk("b", 0.113, Some(0.103));
        assert!((r.p_value.unwrap() - 0.2726).abs() < 5e-4);
        let (lo, hi) = r.ci.unwrap();
        assert!(lo < r.rr && r.rr < hi);
    }
}
