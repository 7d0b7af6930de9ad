//! Parameter priors and scalar log-density helpers.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::params::{Interval, ParameterVector};

/// `ln N(x | mean, var)`. `var = 0` gives a point mass (`0` or `-inf`).
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return if x == mean { 0.0 } else { f64::NEG_INFINITY };
    }
    let r = x - mean;
    -0.5 * ((2.0 * PI * var).ln() + r * r / var)
}

/// `ln Bin(k | n, p)`, `-inf` outside the support.
pub fn binomial_logpmf(k: i64, n: i64, p: f64) -> f64 {
    if k < 0 || n < 0 || k > n || !(0.0..=1.0).contains(&p) {
        return f64::NEG_INFINITY;
    }
    let (k_f, n_f) = (k as f64, n as f64);
    let log_choose = if k == 0 || k == n {
        0.0
    } else {
        ln_gamma(n_f + 1.0) - ln_gamma(k_f + 1.0) - ln_gamma(n_f - k_f + 1.0)
    };
    let a = if k == 0 { 0.0 } else { k_f * p.ln() };
    let b = if k == n { 0.0 } else { (n_f - k_f) * (-p).ln_1p() };
    log_choose + a + b
}

/// `ln Poisson(k | rate)`.
pub fn poisson_logpmf(k: i64, rate: f64) -> f64 {
    if k < 0 {
        return f64::NEG_INFINITY;
    }
    if rate == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * rate.ln() - rate - ln_gamma(k as f64 + 1.0)
}

/// Marginal prior of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "kebab-case")]
pub enum PriorDist {
    Beta { alpha: f64, beta: f64 },
    InverseGamma { shape: f64, scale: f64 },
    Gaussian { mean: f64, var: f64 },
    Uniform { lo: f64, hi: f64 },
    PointMass { value: f64 },
}

impl PriorDist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorDist::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            PriorDist::InverseGamma { shape, scale } => shape > 0.0 && scale > 0.0,
            PriorDist::Gaussian { mean, var } => mean.is_finite() && var > 0.0,
            PriorDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            PriorDist::PointMass { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid hyperparameters {self:?}")))
        }
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        match *self {
            PriorDist::Beta { alpha, beta } => {
                if !(0.0..=1.0).contains(&x) {
                    return f64::NEG_INFINITY;
                }
                let a = if alpha == 1.0 { 0.0 } else { (alpha - 1.0) * x.ln() };
                let b = if beta == 1.0 { 0.0 } else { (beta - 1.0) * (-x).ln_1p() };
                let norm = if alpha == 1.0 && beta == 1.0 { 0.0 } else { ln_beta(alpha, beta) };
                a + b - norm
            }
            PriorDist::InverseGamma { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
            }
            PriorDist::Gaussian { mean, var } => normal_logpdf(x, mean, var),
            PriorDist::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorDist::PointMass { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PriorDist::Beta { alpha, beta } => Beta::new(alpha, beta).expect("validated").sample(rng),
            PriorDist::InverseGamma { shape, scale } => {
                1.0 / Gamma::new(shape, 1.0 / scale).expect("validated").sample(rng)
            }
            PriorDist::Gaussian { mean, var } => {
                Normal::new(mean, var.sqrt()).expect("validated").sample(rng)
            }
            PriorDist::Uniform { lo, hi } => rng.random_range(lo..hi),
            PriorDist::PointMass { value } => value,
        }
    }

    /// Closed support, used as parameter bounds.
    pub fn support(&self) -> Interval {
        match *self {
            PriorDist::Beta { .. } => Interval::UNIT,
            PriorDist::InverseGamma { .. } => Interval::POSITIVE,
            PriorDist::Gaussian { .. } => Interval::REAL,
            PriorDist::Uniform { lo, hi } => Interval { lo, hi },
            PriorDist::PointMass { value } => Interval {
                lo: value,
                hi: value,
            },
        }
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, PriorDist::PointMass { .. })
    }
}

/// `(α, β)` of the Beta distribution with mode `1/μ₀` from the family
/// `α = 1 + 2/μ₀`, `β = 3 - 2/μ₀`.
pub fn mode_matched_beta(mean_time: f64) -> Result<(f64, f64)> {
    if mean_time.is_nan() || mean_time <= 2.0 {
        return Err(Error::Domain(format!(
            "mean time {mean_time} must exceed 2"
        )));
    }
    Ok((1.0 + 2.0 / mean_time, 3.0 - 2.0 / mean_time))
}

/// Independent per-parameter priors; joint log-density is the sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    entries: Vec<(String, PriorDist)>,
}

impl Prior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, dist: PriorDist) -> Self {
        self.entries.push((name.into(), dist));
        self
    }

    pub fn entries(&self) -> &[(String, PriorDist)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&PriorDist> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (n, d)) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|(m, _)| m == n) {
                return Err(Error::input(format!("duplicate prior for {n}")));
            }
            d.validate()?;
        }
        Ok(())
    }

    /// Draw a parameter vector in `names` order; point masses become fixed.
    pub fn sample<R: Rng + ?Sized>(&self, names: &[String], rng: &mut R) -> Result<ParameterVector> {
        let mut values = Vec::with_capacity(names.len());
        for n in names {
            let d = self
                .get(n)
                .ok_or_else(|| Error::input(format!("no prior for {n}")))?;
            values.push(d.sample(rng));
        }
        self.parameters(names, &values)
    }

    /// Parameter vector bounded by the prior supports.
    pub fn parameters(&self, names: &[String], values: &[f64]) -> Result<ParameterVector> {
        let mut bounds = Vec::with_capacity(names.len());
        for n in names {
            let d = self
                .get(n)
                .ok_or_else(|| Error::input(format!("no prior for {n}")))?;
            let s = d.support();
            // point masses get a nominal interval; they are fixed anyway
            bounds.push(if s.lo == s.hi { Interval::REAL } else { s });
        }
        let mut p = ParameterVector::with_bounds(names.iter().cloned(), values, &bounds)?;
        for n in names {
            if self.get(n).is_some_and(PriorDist::is_point_mass) {
                p.set_fixed(n, true)?;
            }
        }
        Ok(p)
    }
}

/// Joint prior log-density at `theta`; every prior entry must name a parameter.
pub fn prior_logpdf(prior: &Prior, theta: &ParameterVector) -> Result<f64> {
    let mut acc = 0.0;
    for (name, d) in prior.entries() {
        let v = theta
            .get(name)
            .ok_or_else(|| Error::input(format!("parameter {name} missing")))?;
        acc += d.logpdf(v);
    }
    Ok(acc)
}
