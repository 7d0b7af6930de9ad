//! Ancestor selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplingScheme {
    Multinomial,
    #[default]
    Systematic,
}

fn check(weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::input(format!("invalid weight {w}")));
        }
        total += w;
    }
    if total <= 0.0 || weights.is_empty() {
        return Err(Error::Degeneracy { step: 0 });
    }
    Ok(total)
}

/// First index whose running sum exceeds `u`.
#[inline]
fn search(cumsum: &[f64], u: f64) -> usize {
    let i = cumsum.partition_point(|&c| c <= u);
    i.min(cumsum.len() - 1)
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|&w| {
            acc += w;
            acc
        })
        .collect()
}

/// One categorical draw; the first index with positive mass wins ties.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total = check(weights)?;
    let u: f64 = rng.random::<f64>() * total;
    let cs = cumulative(weights);
    let mut i = search(&cs, u);
    while weights[i] == 0.0 && i > 0 {
        i -= 1;
    }
    Ok(i)
}

/// `n` i.i.d. categorical draws.
pub fn resample_multinomial<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let total = check(weights)?;
    let cs = cumulative(weights);
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let mut i = search(&cs, u);
            // rounding can land on a trailing zero-mass slot
            while weights[i] == 0.0 && i > 0 {
                i -= 1;
            }
            i
        })
        .collect())
}

/// Stratified positions `(k + U)/n` through the cumulative weights.
pub fn resample_systematic<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let total = check(weights)?;
    let u0: f64 = rng.random();
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut acc = weights[0];
    for k in 0..n {
        let pos = (k as f64 + u0) * step;
        while acc <= pos && i + 1 < weights.len() {
            i += 1;
            acc += weights[i];
        }
        let mut j = i;
        while weights[j] == 0.0 && j > 0 {
            j -= 1;
        }
        out.push(j);
    }
    Ok(out)
}

pub fn resample<R: Rng + ?Sized>(
    scheme: ResamplingScheme,
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    match scheme {
        ResamplingScheme::Multinomial => resample_multinomial(weights, n, rng),
        ResamplingScheme::Systematic => resample_systematic(weights, n, rng),
    }
}

/// `1 / Σ w²` for normalized weights.
pub fn effective_sample_size(norm_weights: &[f64]) -> f64 {
    1.0 / norm_weights.iter().map(|w| w * w).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn counts(idx: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &i in idx {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn point_mass_selects_single_index() {
        let mut rng = RandomStream::new(3, 0);
        assert_eq!(resample_multinomial(&[1.0, 0.0, 0.0], 3, &mut rng).unwrap(), vec![0; 3]);
        assert_eq!(resample_systematic(&[1.0, 0.0], 2, &mut rng).unwrap(), vec![0; 2]);
        assert_eq!(resample_systematic(&[0.0, 0.0, 1.0], 4, &mut rng).unwrap(), vec![2; 4]);
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let mut rng = RandomStream::new(3, 0);
        assert!(resample_multinomial(&[0.0, 0.0], 2, &mut rng).unwrap_err().is_degeneracy());
        assert!(resample_systematic(&[0.0], 1, &mut rng).unwrap_err().is_degeneracy());
    }

    #[test]
    fn multinomial_frequencies_within_binomial_bounds() {
        let mut rng = RandomStream::new(17, 1);
        let n = 100_000;
        let idx = resample_multinomial(&[0.25; 4], n, &mut rng).unwrap();
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts(&idx, 4) {
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn multinomial_is_deterministic() {
        let a = resample_multinomial(&[0.5, 0.5], 20, &mut RandomStream::new(9, 2)).unwrap();
        let b = resample_multinomial(&[0.5, 0.5], 20, &mut RandomStream::new(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn systematic_uniform_gives_one_offspring_each() {
        let mut rng = RandomStream::new(4, 4);
        let idx = resample_systematic(&[0.1; 10], 10, &mut rng).unwrap();
        assert_eq!(counts(&idx, 10), vec![1; 10]);
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[1.0, 0.0, 0.0]), 1.0);
        assert!((effective_sample_size(&[0.5, 0.25, 0.25]) - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_offspring_bound_on_random_weights() {
        let mut rng = RandomStream::new(99, 0);
        for _ in 0..10_000 {
            let n = rng.random_range(2..20);
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
            let s: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|v| v / s).collect();
            let idx = resample_systematic(&w, n, &mut rng).unwrap();
            for (i, c) in counts(&idx, n).into_iter().enumerate() {
                let e = n as f64 * w[i];
                assert!(
                    c as f64 >= (e - 1e-9).floor() && c as f64 <= (e + 1e-9).ceil(),
                    "count {c} expected {e}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn indices_in_range_and_positive_mass(seed in any::<u64>(), w in prop::collection::vec(0.0..1.0f64, 1..30)) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let mut rng = RandomStream::new(seed, 0);
            for scheme in [ResamplingScheme::Multinomial, ResamplingScheme::Systematic] {
                let idx = resample(scheme, &w, w.len(), &mut rng).unwrap();
                prop_assert_eq!(idx.len(), w.len());
                for i in idx {
                    prop_assert!(i < w.len() && w[i] > 0.0);
                }
            }
        }
    }
}
