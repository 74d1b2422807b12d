use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

/// Significance threshold used throughout the reports.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample {label:?} has {n} values; at least 2 are needed")]
    TooFewSamples { label: String, n: usize },
    #[error("sample {label:?} contains a non-finite value")]
    NonFinite { label: String },
}

/// Repeated measurements of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<SampleSet, StatsError> {
        let label = label.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite { label });
        }
        Ok(SampleSet { label, values })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (self.n() as f64 - 1.0)
    }

    pub fn stddev(&self) -> f64 {
        self.variance().sqrt()
    }

    fn require_two(&self) -> Result<(), StatsError> {
        if self.n() < 2 {
            return Err(StatsError::TooFewSamples {
                label: self.label.clone(),
                n: self.n(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t_statistic: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub degrees_of_freedom: f64,
    /// Two-sided.
    pub p_value: f64,
    pub significant: bool,
    /// Both samples had zero variance; `p` is 1 or 0 by convention.
    pub degenerate: bool,
}

/// Two-sided `P(|T| >= |t|)` for Student's t with `df` degrees of freedom,
/// through the regularized incomplete beta function.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Welch's unequal-variances t-test of `a` against `b`. The statistic is
/// positive when `a` has the larger mean.
pub fn welch_t_test(a: &SampleSet, b: &SampleSet, alpha: f64) -> Result<WelchResult, StatsError> {
    a.require_two()?;
    b.require_two()?;
    let (na, nb) = (a.n() as f64, b.n() as f64);
    let (qa, qb) = (a.variance() / na, b.variance() / nb);
    let diff = a.mean() - b.mean();
    let se2 = qa + qb;
    if se2 == 0.0 {
        let p_value = if diff == 0.0 { 1.0 } else { 0.0 };
        return Ok(WelchResult {
            t_statistic: if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY },
            degrees_of_freedom: na + nb - 2.0,
            p_value,
            significant: p_value < alpha,
            degenerate: true,
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let p_value = t_two_sided_p(t, df);
    Ok(WelchResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value,
        significant: p_value < alpha,
        degenerate: false,
    })
}
