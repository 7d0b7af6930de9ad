//! Summary statistics and goodness-of-fit tests.

use num_traits::Float;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// `ln Σ exp(x_i)`, `-inf` for an empty or all `-inf` input.
pub fn logsumexp<F: Float>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() || m.is_nan() {
        return F::neg_infinity();
    }
    if m == F::infinity() {
        return m;
    }
    let s = xs.iter().fold(F::zero(), |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

pub fn mean<F: Float>(xs: &[F]) -> F {
    let n = F::from(xs.len()).expect("length representable");
    xs.iter().fold(F::zero(), |a, &x| a + x) / n
}

/// Unbiased sample variance.
pub fn variance<F: Float>(xs: &[F]) -> F {
    let m = mean(xs);
    let n = F::from(xs.len()).expect("length representable");
    xs.iter().fold(F::zero(), |a, &x| a + (x - m) * (x - m)) / (n - F::one())
}

pub fn std_dev<F: Float>(xs: &[F]) -> F {
    variance(xs).sqrt()
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `P(K > λ)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (small-sample corrected argument `(√nₑ + 0.12 + 0.11/√nₑ) D`).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("KS test needs nonempty samples"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let s = ne.sqrt();
    let p = kolmogorov_q((s + 0.12 + 0.11 / s) * d);
    Ok(TestResult {
        statistic: d,
        p_value: p,
    })
}

/// Pearson χ² goodness of fit of `counts` against cell probabilities `probs`.
/// Cells with zero probability must have zero count.
pub fn chi_square_gof(counts: &[u64], probs: &[f64]) -> Result<TestResult> {
    if counts.len() != probs.len() || counts.len() < 2 {
        return Err(Error::input("counts and probabilities mismatch"));
    }
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            if c > 0 {
                return Ok(TestResult {
                    statistic: f64::INFINITY,
                    p_value: 0.0,
                });
            }
            continue;
        }
        let e = total as f64 * p;
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    let dist = ChiSquared::new((cells - 1) as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(TestResult {
        statistic: stat,
        p_value: 1.0 - dist.cdf(stat),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn logsumexp_handles_infinities() {
        assert_eq!(logsumexp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v32 = logsumexp(&[0.0f32, 0.0]);
        assert!((v32 - 2f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // tabulated values of the Kolmogorov distribution
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 5e-4);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 2e-4);
    }

    #[test]
    fn ks_same_distribution_not_rejected_often() {
        let mut rng = RandomStream::new(1, 0);
        let mut rejections = 0;
        for _ in 0..200 {
            let a: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
            if ks_two_sample(&a, &b).unwrap().p_value < 0.05 {
                rejections += 1;
            }
        }
        // nominal 10 of 200
        assert!(rejections < 22, "{rejections}");
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = RandomStream::new(2, 0);
        let a: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value < 1e-6);
    }

    #[test]
    fn chi_square_known_value() {
        // two cells off by 10 from 50: statistic 4 on one degree of freedom
        let r = chi_square_gof(&[60, 40], &[0.5, 0.5]).unwrap();
        assert!((r.statistic - 4.0).abs() < 1e-12);
        assert!((r.p_value - 0.0455).abs() < 1e-3);
        let r = chi_square_gof(&[1, 0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
    }
}
