use std::fmt;
use std::str::FromStr;

use crate::copulas::{Copula, CopulaFamily};
use crate::error::{Error, Result};
use crate::event_data::Dataset;
use crate::frailty_posterior::JointFrailty;
use crate::marginals::{Marginal, MarginalFamily};

/// The four copula/margin combinations: first letter the copula (Clayton or
/// Gaussian), second the margin (`g` gamma frailty, `G` Gaussian random
/// effect).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelLabel {
    Cg,
    CG,
    Gg,
    GG,
}

impl ModelLabel {
    pub const ALL: [ModelLabel; 4] = [ModelLabel::Cg, ModelLabel::CG, ModelLabel::Gg, ModelLabel::GG];

    pub fn copula_family(self) -> CopulaFamily {
        match self {
            ModelLabel::Cg | ModelLabel::CG => CopulaFamily::Clayton,
            ModelLabel::Gg | ModelLabel::GG => CopulaFamily::Gaussian,
        }
    }

    pub fn marginal_family(self) -> MarginalFamily {
        match self {
            ModelLabel::Cg | ModelLabel::Gg => MarginalFamily::Gamma,
            ModelLabel::CG | ModelLabel::GG => MarginalFamily::Gaussian,
        }
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelLabel::Cg => "Cg",
            ModelLabel::CG => "CG",
            ModelLabel::Gg => "Gg",
            ModelLabel::GG => "GG",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Cg" => Ok(ModelLabel::Cg),
            "CG" => Ok(ModelLabel::CG),
            "Gg" => Ok(ModelLabel::Gg),
            "GG" => Ok(ModelLabel::GG),
            other => Err(Error::Config(format!("unknown model label {other:?}; expected Cg, CG, Gg or GG"))),
        }
    }
}

/// Cumulative baseline intensity of one event type: a right-continuous step
/// function with jumps at the distinct event times.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStep {
    times: Vec<f64>,
    jumps: Vec<f64>,
    cumulative: Vec<f64>,
}

impl BaselineStep {
    pub fn new(times: Vec<f64>, jumps: Vec<f64>) -> Result<Self> {
        if times.len() != jumps.len() {
            return Err(Error::domain("baseline times and jumps differ in length"));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::domain("baseline times must be strictly increasing"));
        }
        if jumps.iter().any(|j| !(*j >= 0.0) || !j.is_finite()) {
            return Err(Error::domain("baseline jumps must be finite and non-negative"));
        }
        let mut acc = 0.0;
        let cumulative = jumps
            .iter()
            .map(|j| {
                acc += j;
                acc
            })
            .collect();
        Ok(BaselineStep { times, jumps, cumulative })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn cumulative_values(&self) -> &[f64] {
        &self.cumulative
    }

    /// `Λ0(t)`: sum of the jumps at times `≤ t`.
    pub fn cumulative(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }

    /// `Λ0` after the first `k` jumps.
    pub fn cumulative_through(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// Full parameter vector: regression coefficients, baseline step functions,
/// marginal frailty variances and copula parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    /// `beta[j]` holds the `p` coefficients of event type `j`.
    pub beta: Vec<Vec<f64>>,
    pub baseline: Vec<BaselineStep>,
    pub marginal_alphas: Vec<f64>,
    pub copula: Copula,
}

impl ParameterVector {
    pub fn n_types(&self) -> usize {
        self.beta.len()
    }

    pub fn joint(&self, family: MarginalFamily) -> Result<JointFrailty> {
        let margins = self.marginal_alphas.iter().map(|&a| Marginal::new(family, a)).collect::<Result<Vec<_>>>()?;
        JointFrailty::new(margins, self.copula.clone())
    }

    /// Coordinates watched by the convergence rule: β (type-major), then the
    /// marginal variances, then the copula parameters.
    pub fn monitored(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().flatten().copied().collect();
        v.extend_from_slice(&self.marginal_alphas);
        v.extend(self.copula.params());
        v
    }

    pub fn monitored_names(&self, covariate_names: &[String]) -> Vec<String> {
        let mut names = Vec::new();
        for j in 0..self.beta.len() {
            for (k, _) in self.beta[j].iter().enumerate() {
                let cov = covariate_names.get(k).cloned().unwrap_or_else(|| format!("x{}", k + 1));
                names.push(format!("beta_{}[{cov}]", j + 1));
            }
        }
        for j in 0..self.marginal_alphas.len() {
            names.push(format!("alpha_{}", j + 1));
        }
        names.extend(self.copula.param_names());
        names
    }

    /// Coordinate-wise mean of iterates sharing one set of baseline jump
    /// times. Averaged correlation matrices stay positive definite.
    pub fn average(iterates: &[ParameterVector]) -> Result<ParameterVector> {
        let first = iterates.first().ok_or_else(|| Error::domain("no iterates to average"))?;
        let k = iterates.len() as f64;
        let mean_of = |f: &dyn Fn(&ParameterVector) -> Vec<f64>| {
            let mut acc = f(first);
            for p in &iterates[1..] {
                for (a, v) in acc.iter_mut().zip(f(p)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= k);
            acc
        };
        let beta = (0..first.n_types()).map(|j| mean_of(&|p: &ParameterVector| p.beta[j].clone())).collect();
        let baseline = (0..first.n_types())
            .map(|j| {
                BaselineStep::new(
                    first.baseline[j].times().to_vec(),
                    mean_of(&|p: &ParameterVector| p.baseline[j].jumps().to_vec()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParameterVector {
            beta,
            baseline,
            marginal_alphas: mean_of(&|p: &ParameterVector| p.marginal_alphas.clone()),
            copula: first.copula.with_params(&mean_of(&|p: &ParameterVector| p.copula.params()))?,
        })
    }

    /// `Λ0j(τ_i) exp(x_i'β_j)` for every subject and type.
    pub fn subject_hazards(&self, d: &Dataset) -> Vec<Vec<f64>> {
        d.subjects()
            .iter()
            .map(|s| {
                (0..self.n_types())
                    .map(|j| self.baseline[j].cumulative(s.censoring_time) * s.linear_predictor(&self.beta[j]).exp())
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for m in ModelLabel::ALL {
            assert_eq!(m.to_string().parse::<ModelLabel>().unwrap(), m);
        }
        assert!("cg".parse::<ModelLabel>().is_err());
        assert_eq!(ModelLabel::CG.marginal_family(), MarginalFamily::Gaussian);
        assert_eq!(ModelLabel::Gg.copula_family(), CopulaFamily::Gaussian);
    }

    #[test]
    fn step_function_is_right_continuous() {
        let b = BaselineStep::new(vec![1.0, 2.0, 4.0], vec![0.5, 0.25, 1.0]).unwrap();
        assert_eq!(b.cumulative(0.999), 0.0);
        assert_eq!(b.cumulative(1.0), 0.5);
        assert_eq!(b.cumulative(3.0), 0.75);
        assert_eq!(b.cumulative(100.0), 1.75);
        assert_eq!(b.total(), 1.75);
        assert!(BaselineStep::new(vec![1.0, 1.0], vec![0.1, 0.1]).is_err());
        assert!(BaselineStep::new(vec![1.0], vec![-0.1]).is_err());
    }
}
