//! Simulated multi-type recurrent event data and the replication study
//! (bias, variance, MSE and Wald coverage over replicates).

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::copulas::{Copula, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::event_data::{Dataset, SubjectData};
use crate::frailty_posterior::JointFrailty;
use crate::marginals::Marginal;
use crate::mcem::{fit, FitConfig, ModelLabel};
use crate::parallel::{self, Execution};

const Z_975: f64 = 1.959_963_984_540_054;
/// Largest tolerated share of non-converged replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_types: usize,
    pub model: ModelLabel,
    /// `[α_c]` for Clayton; for the Gaussian copula either one exchangeable
    /// `ρ` or all `m(m−1)/2` pairwise correlations.
    pub copula_truth: Vec<f64>,
    pub alpha_truth: Vec<f64>,
    /// Treatment effect per event type.
    pub beta_truth: Vec<f64>,
    /// Rate of the exponential censoring time `C*`.
    pub censor_rate: f64,
    /// Administrative cutoff `C`; `τ_i = min(C*_i, C)`.
    pub admin_cutoff: f64,
    pub n_replicates: usize,
    pub seed: u64,
}

impl SimConfig {
    /// The standard design: three event types, unit marginal variances,
    /// `β = (1, 0.8, 0.4)`, and copula strength by setting (1–3): Clayton
    /// `α_c ∈ {0.1, 1.333, 8}`, Gaussian `ρ ∈ {0, 0.4, 0.8}`.
    pub fn standard(model: ModelLabel, setting: usize, n_subjects: usize) -> Result<Self> {
        let copula_truth = match (model.copula_family(), setting) {
            (crate::copulas::CopulaFamily::Clayton, 1) => 0.1,
            (crate::copulas::CopulaFamily::Clayton, 2) => 1.333,
            (crate::copulas::CopulaFamily::Clayton, 3) => 8.0,
            (crate::copulas::CopulaFamily::Gaussian, 1) => 0.0,
            (crate::copulas::CopulaFamily::Gaussian, 2) => 0.4,
            (crate::copulas::CopulaFamily::Gaussian, 3) => 0.8,
            _ => return Err(Error::Config(format!("setting must be 1, 2 or 3, got {setting}"))),
        };
        Ok(SimConfig {
            n_subjects,
            n_types: 3,
            model,
            copula_truth: vec![copula_truth],
            alpha_truth: vec![1.0; 3],
            beta_truth: vec![1.0, 0.8, 0.4],
            censor_rate: 0.5,
            admin_cutoff: 1.0,
            n_replicates: 100,
            seed: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_types;
        if self.n_subjects == 0 || m == 0 {
            return Err(Error::Config("n_subjects and n_types must be positive".into()));
        }
        if self.alpha_truth.len() != m || self.beta_truth.len() != m {
            return Err(Error::Config(format!("alpha and beta truths need {m} entries each")));
        }
        if !(self.censor_rate > 0.0) || !(self.admin_cutoff > 0.0) {
            return Err(Error::Config("censor_rate and admin_cutoff must be positive".into()));
        }
        self.joint()?;
        Ok(())
    }

    pub fn copula(&self) -> Result<Copula> {
        let m = self.n_types;
        match self.model.copula_family() {
            crate::copulas::CopulaFamily::Clayton => match self.copula_truth.as_slice() {
                [a] => Copula::clayton(m, *a),
                _ => Err(Error::Config("Clayton truth takes a single alpha_c".into())),
            },
            crate::copulas::CopulaFamily::Gaussian => {
                let r = match self.copula_truth.as_slice() {
                    [rho] => CorrelationMatrix::exchangeable(m, *rho)?,
                    pairs => CorrelationMatrix::from_pairs(m, pairs)?,
                };
                Ok(Copula::Gaussian(r))
            }
        }
    }

    pub fn joint(&self) -> Result<JointFrailty> {
        let family = self.model.marginal_family();
        let margins = self.alpha_truth.iter().map(|&a| Marginal::new(family, a)).collect::<Result<Vec<_>>>()?;
        JointFrailty::new(margins, self.copula()?)
    }

    /// True values in the fitter's monitored order (β, α_j, copula).
    pub fn truth(&self) -> Result<Vec<f64>> {
        let mut v = self.beta_truth.clone();
        v.extend_from_slice(&self.alpha_truth);
        v.extend(self.copula()?.params());
        Ok(v)
    }
}

/// Event times of one subject: per type, a homogeneous Poisson process with
/// the given rate observed on `[0, τ)`.
pub fn generate_events<R: Rng + ?Sized>(rng: &mut R, rates: &[f64], tau: f64) -> Vec<Vec<f64>> {
    rates
        .iter()
        .map(|&rate| {
            let mut times = Vec::new();
            if !(rate > 0.0) || !rate.is_finite() {
                return times;
            }
            let gap = Exp::new(rate).expect("positive rate");
            let mut t = 0.0;
            loop {
                t += gap.sample(rng);
                if t >= tau {
                    break;
                }
                times.push(t);
            }
            times
        })
        .collect()
}

/// Generates one data set; also returns the latent frailties `w_ij`.
pub fn generate_with_frailties<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(Dataset, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let joint = cfg.joint()?;
    let censor = Exp::new(cfg.censor_rate).map_err(|e| Error::Config(e.to_string()))?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut frailties = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let b = joint.sample_log_scale(rng);
        let x = if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 };
        let tau = censor.sample(rng).min(cfg.admin_cutoff);
        let rates: Vec<f64> = (0..cfg.n_types).map(|j| (b[j] + x * cfg.beta_truth[j]).exp()).collect();
        let events = generate_events(rng, &rates, tau);
        subjects.push(SubjectData { id: (i + 1).to_string(), covariates: vec![x], censoring_time: tau, events });
        frailties.push(b.iter().map(|v| v.exp()).collect());
    }
    let labels = (1..=cfg.n_types).map(|j| j.to_string()).collect();
    let d = Dataset::new(subjects, labels, vec!["treatment".into()])?;
    Ok((d, frailties))
}

pub fn generate_dataset<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Dataset> {
    generate_with_frailties(cfg, rng).map(|(d, _)| d)
}

/// RNG stream of replicate `r`.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ r as u64)
}

fn replicate_fit_seed(seed: u64, r: usize) -> u64 {
    (seed ^ r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub converged: bool,
    pub iterations: usize,
    pub seconds: f64,
    pub censored_fraction: f64,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
    pub cp: f64,
    /// Replicates with a standard error (the CP denominator).
    pub n_cp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub config: SimConfig,
    pub names: Vec<String>,
    pub parameters: Vec<ParameterSummary>,
    pub replicates: Vec<ReplicateOutcome>,
    pub n_used: usize,
    pub n_failed: usize,
}

/// Parameter names in the fitter's monitored order for a single-treatment
/// design.
pub fn parameter_names(cfg: &SimConfig) -> Result<Vec<String>> {
    let m = cfg.n_types;
    let mut names: Vec<String> = (1..=m).map(|j| format!("beta_{j}[treatment]")).collect();
    names.extend((1..=m).map(|j| format!("alpha_{j}")));
    names.extend(cfg.copula()?.param_names());
    Ok(names)
}

/// Simulates and fits every replicate; failures are recorded, not raised.
pub fn run_replicates(
    cfg: &SimConfig,
    fit_cfg: &FitConfig,
    exec: Execution,
    progress: &(dyn Fn(&ReplicateOutcome) + Sync),
) -> Result<Vec<ReplicateOutcome>> {
    cfg.validate()?;
    if cfg.n_replicates == 0 {
        return Err(Error::Study("study needs at least one replicate".into()));
    }
    // replicates carry the parallelism; each fit runs sequentially inside
    let inner =
        FitConfig { exec: if exec.is_parallel() { Execution::Sequential } else { fit_cfg.exec }, ..fit_cfg.clone() };
    let n_par = cfg.truth()?.len();
    Ok(parallel::map_range(exec, cfg.n_replicates, |r| {
        let start = Instant::now();
        let mut rng = replicate_rng(cfg.seed, r);
        let out = match generate_dataset(cfg, &mut rng) {
            Err(e) => ReplicateOutcome {
                index: r,
                converged: false,
                iterations: 0,
                seconds: start.elapsed().as_secs_f64(),
                censored_fraction: f64::NAN,
                estimates: vec![f64::NAN; n_par],
                std_errors: vec![None; n_par],
                error: Some(e.to_string()),
            },
            Ok(d) => {
                let fc = FitConfig { seed: replicate_fit_seed(cfg.seed, r), ..inner.clone() };
                match fit(&d, cfg.model, &fc) {
                    Ok(f) => ReplicateOutcome {
                        index: r,
                        converged: f.converged,
                        iterations: f.n_iterations,
                        seconds: start.elapsed().as_secs_f64(),
                        censored_fraction: d.event_free_fraction(),
                        estimates: f.estimates(),
                        std_errors: f.std_errors.clone(),
                        error: None,
                    },
                    Err(e) => ReplicateOutcome {
                        index: r,
                        converged: false,
                        iterations: 0,
                        seconds: start.elapsed().as_secs_f64(),
                        censored_fraction: d.event_free_fraction(),
                        estimates: vec![f64::NAN; n_par],
                        std_errors: vec![None; n_par],
                        error: Some(e.to_string()),
                    },
                }
            }
        };
        progress(&out);
        out
    }))
}

/// Bias, variance (divisor `R`), MSE and Wald coverage over the converged
/// replicates.
pub fn summarize_replicates(cfg: &SimConfig, replicates: Vec<ReplicateOutcome>) -> Result<StudyResult> {
    let truth = cfg.truth()?;
    let names = parameter_names(cfg)?;
    let used: Vec<&ReplicateOutcome> = replicates.iter().filter(|r| r.converged).collect();
    let n_used = used.len();
    let n_failed = replicates.len() - n_used;
    let mut parameters = Vec::with_capacity(truth.len());
    for (k, (&t, name)) in truth.iter().zip(&names).enumerate() {
        let xs: Vec<f64> = used.iter().map(|r| r.estimates[k]).collect();
        let nf = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let mse = xs.iter().map(|x| (x - t).powi(2)).sum::<f64>() / nf;
        let with_se: Vec<(f64, f64)> =
            used.iter().filter_map(|r| r.std_errors[k].map(|s| (r.estimates[k], s))).collect();
        let covered = with_se.iter().filter(|(x, s)| (x - t).abs() <= Z_975 * s).count();
        let cp = if with_se.is_empty() { f64::NAN } else { covered as f64 / with_se.len() as f64 };
        parameters.push(ParameterSummary {
            name: name.clone(),
            truth: t,
            mean,
            bias: mean - t,
            var,
            mse,
            cp,
            n_cp: with_se.len(),
        });
    }
    Ok(StudyResult { config: cfg.clone(), names, parameters, replicates, n_used, n_failed })
}

/// Full study; errors when more than 20% of replicates fail to converge.
pub fn run_study(
    cfg: &SimConfig,
    fit_cfg: &FitConfig,
    exec: Execution,
    progress: &(dyn Fn(&ReplicateOutcome) + Sync),
) -> Result<StudyResult> {
    let reps = run_replicates(cfg, fit_cfg, exec, progress)?;
    let result = summarize_replicates(cfg, reps)?;
    let share = result.n_failed as f64 / cfg.n_replicates as f64;
    if share > MAX_FAILURE_SHARE {
        return Err(Error::Study(format!(
            "{} of {} replicates did not converge (more than {:.0}%)",
            result.n_failed,
            cfg.n_replicates,
            100.0 * MAX_FAILURE_SHARE
        )));
    }
    Ok(result)
}

impl StudyResult {
    /// `parameter,truth,mean,bias,var,MSE,CP`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "parameter,truth,mean,bias,var,MSE,CP")?;
        for p in &self.parameters {
            writeln!(out, "{},{},{},{},{},{},{}", p.name, p.truth, p.mean, p.bias, p.var, p.mse, p.cp)?;
        }
        Ok(())
    }

    /// One row per replicate: index, convergence, iterations, runtime,
    /// event-free fraction, then estimates and standard errors.
    pub fn write_replicates_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "replicate,converged,iterations,seconds,censored_fraction")?;
        for n in &self.names {
            write!(out, ",{n}")?;
        }
        for n in &self.names {
            write!(out, ",se_{n}")?;
        }
        writeln!(out, ",error")?;
        for r in &self.replicates {
            write!(out, "{},{},{},{},{}", r.index, r.converged, r.iterations, r.seconds, r.censored_fraction)?;
            for v in &r.estimates {
                write!(out, ",{v}")?;
            }
            for s in &r.std_errors {
                match s {
                    Some(s) => write!(out, ",{s}")?,
                    None => write!(out, ",NA")?,
                }
            }
            writeln!(out, ",{}", r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"))?;
        }
        Ok(())
    }

    pub fn mean_censored_fraction(&self) -> f64 {
        let v: Vec<f64> = self.replicates.iter().map(|r| r.censored_fraction).filter(|x| x.is_finite()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_settings() {
        let c = SimConfig::standard(ModelLabel::Cg, 2, 200).unwrap();
        assert_eq!(c.truth().unwrap(), vec![1.0, 0.8, 0.4, 1.0, 1.0, 1.0, 1.333]);
        let g = SimConfig::standard(ModelLabel::Gg, 1, 200).unwrap();
        assert_eq!(parameter_names(&g).unwrap().len(), 9);
        assert!(SimConfig::standard(ModelLabel::Gg, 4, 200).is_err());
    }

    #[test]
    fn datasets_validate_and_reproduce() {
        let c = SimConfig::standard(ModelLabel::Cg, 2, 50).unwrap();
        let a = generate_dataset(&c, &mut replicate_rng(3, 0)).unwrap();
        let b = generate_dataset(&c, &mut replicate_rng(3, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_subjects(), 50);
        for s in a.subjects() {
            assert!(s.censoring_time <= 1.0);
            assert!(s.events.iter().flatten().all(|&t| t < s.censoring_time));
        }
    }

    #[test]
    fn summary_identities() {
        let c = SimConfig { n_replicates: 3, ..SimConfig::standard(ModelLabel::Cg, 1, 10).unwrap() };
        let rep = |i: usize, shift: f64, conv: bool| ReplicateOutcome {
            index: i,
            converged: conv,
            iterations: 5,
            seconds: 0.0,
            censored_fraction: 0.3,
            estimates: c.truth().unwrap().iter().map(|t| t + shift).collect(),
            std_errors: vec![Some(0.1); 7],
            error: None,
        };
        let s = summarize_replicates(&c, vec![rep(0, 0.05, true), rep(1, -0.25, true), rep(2, 9.0, false)]).unwrap();
        assert_eq!((s.n_used, s.n_failed), (2, 1));
        let p = &s.parameters[0];
        assert!((p.bias - (-0.1)).abs() < 1e-12);
        assert!((p.mse - (p.bias * p.bias + p.var)).abs() < 1e-12 * p.mse.max(1e-300));
        assert_eq!(p.cp, 0.5);
    }
}
