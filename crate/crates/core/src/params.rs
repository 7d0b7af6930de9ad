//! Named parameters with box constraints and unconstrained reparameterization.
//!
//! Each coordinate maps to the real line through a bijection chosen from its
//! bounds: identity when unbounded, `ln(x - lo)` or `-ln(hi - x)` when
//! half-bounded, and a scaled logit on `(lo, hi)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval, endpoints may be infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const REAL: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    pub const POSITIVE: Interval = Interval {
        lo: 0.0,
        hi: f64::INFINITY,
    };
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::input(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Unconstrained coordinate of `x`.
    pub fn to_unconstrained(&self, x: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (false, false) => x,
            (true, false) => (x - self.lo).ln(),
            (false, true) => -(self.hi - x).ln(),
            (true, true) => {
                let p = (x - self.lo) / (self.hi - self.lo);
                p.ln() - (-p).ln_1p()
            }
        }
    }

    pub fn from_unconstrained(&self, u: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (false, false) => u,
            (true, false) => self.lo + u.exp(),
            (false, true) => self.hi - (-u).exp(),
            (true, true) => {
                let p = sigmoid(u);
                // keep the image inside the interval under rounding
                (self.lo + (self.hi - self.lo) * p).clamp(self.lo, self.hi)
            }
        }
    }

    /// First and second derivative of `from_unconstrained` at `u`.
    pub fn derivatives(&self, u: f64) -> (f64, f64) {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (false, false) => (1.0, 0.0),
            (true, false) => (u.exp(), u.exp()),
            (false, true) => ((-u).exp(), -(-u).exp()),
            (true, true) => {
                let w = self.hi - self.lo;
                let p = sigmoid(u);
                let d1 = w * p * (1.0 - p);
                (d1, d1 * (1.0 - 2.0 * p))
            }
        }
    }

    /// `ln |d x / d u|` at `u`.
    pub fn log_jacobian(&self, u: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (false, false) => 0.0,
            (true, false) => u,
            (false, true) => -u,
            (true, true) => (self.hi - self.lo).ln() - softplus(-u) - softplus(u),
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Ordered named parameters. `fixed` coordinates are never moved by learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    names: Vec<String>,
    values: Vec<f64>,
    bounds: Vec<Interval>,
    fixed: Vec<bool>,
}

impl ParameterVector {
    /// Unbounded, all free.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>, values: &[f64]) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let bounds = vec![Interval::REAL; names.len()];
        Self::with_bounds(names, values, &bounds)
    }

    pub fn with_bounds<S: Into<String>>(
        names: impl IntoIterator<Item = S>,
        values: &[f64],
        bounds: &[Interval],
    ) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() != values.len() || names.len() != bounds.len() {
            return Err(Error::input("names, values and bounds lengths differ"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::input(format!("duplicate parameter {n}")));
            }
            if !bounds[i].contains(values[i]) {
                return Err(Error::Domain(format!(
                    "{n} = {} outside [{}, {}]",
                    values[i], bounds[i].lo, bounds[i].hi
                )));
            }
        }
        Ok(Self {
            fixed: vec![false; names.len()],
            names,
            values: values.to_vec(),
            bounds: bounds.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &[Interval] {
        &self.bounds
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self
            .index(name)
            .ok_or_else(|| Error::input(format!("unknown parameter {name}")))?;
        self.set_at(i, value)
    }

    pub fn set_at(&mut self, i: usize, value: f64) -> Result<()> {
        if !self.bounds[i].contains(value) {
            return Err(Error::Domain(format!(
                "{} = {value} outside bounds",
                self.names[i]
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn is_fixed(&self, i: usize) -> bool {
        self.fixed[i]
    }

    pub fn set_fixed(&mut self, name: &str, fixed: bool) -> Result<()> {
        let i = self
            .index(name)
            .ok_or_else(|| Error::input(format!("unknown parameter {name}")))?;
        self.fixed[i] = fixed;
        Ok(())
    }

    /// Indices of coordinates learners may move.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.fixed[i]).collect()
    }

    /// Unconstrained coordinates of the free parameters.
    pub fn free_unconstrained(&self) -> Vec<f64> {
        self.free_indices()
            .into_iter()
            .map(|i| self.bounds[i].to_unconstrained(self.values[i]))
            .collect()
    }

    /// Copy with free parameters replaced from unconstrained coordinates.
    pub fn with_free_unconstrained(&self, u: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, i) in self.free_indices().into_iter().enumerate() {
            out.values[i] = self.bounds[i].from_unconstrained(u[k]);
        }
        out
    }

    /// Copy with free parameters replaced by natural-scale values.
    pub fn with_free_values(&self, v: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, i) in self.free_indices().into_iter().enumerate() {
            out.values[i] = v[k].clamp(self.bounds[i].lo, self.bounds[i].hi);
        }
        out
    }

    /// Sum of `ln |dθ/du|` over free coordinates at unconstrained point `u`.
    pub fn free_log_jacobian(&self, u: &[f64]) -> f64 {
        self.free_indices()
            .into_iter()
            .enumerate()
            .map(|(k, i)| self.bounds[i].log_jacobian(u[k]))
            .sum()
    }

    /// Named values as an ordered map-like list.
    pub fn to_pairs(&self) -> Vec<(String, f64)> {
        self.names.iter().cloned().zip(self.values.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn out_of_bounds_rejected() {
        assert!(ParameterVector::with_bounds(["q"], &[-1.0], &[Interval::POSITIVE]).is_err());
        let mut p = ParameterVector::with_bounds(["q"], &[1.0], &[Interval::POSITIVE]).unwrap();
        assert!(p.set("q", -0.1).is_err());
        assert!(p.set("r", 1.0).is_err());
    }

    #[test]
    fn fixed_parameters_are_skipped() {
        let mut p = ParameterVector::new(["a", "b", "c"], &[1.0, 2.0, 3.0]).unwrap();
        p.set_fixed("b", true).unwrap();
        assert_eq!(p.free_indices(), vec![0, 2]);
        let q = p.with_free_unconstrained(&[5.0, 6.0]);
        assert_eq!(q.values(), &[5.0, 2.0, 6.0]);
    }

    fn interval_strategy() -> impl Strategy<Value = Interval> {
        prop_oneof![
            Just(Interval::REAL),
            (-10.0..10.0f64).prop_map(|lo| Interval { lo, hi: f64::INFINITY }),
            (-10.0..10.0f64).prop_map(|hi| Interval { lo: f64::NEG_INFINITY, hi }),
            (-10.0..10.0f64, 0.01..20.0f64).prop_map(|(lo, w)| Interval { lo, hi: lo + w }),
        ]
    }

    proptest! {
        #[test]
        fn transform_roundtrip(iv in interval_strategy(), p in 0.001..0.999f64) {
            let x = match (iv.lo.is_finite(), iv.hi.is_finite()) {
                (false, false) => (p - 0.5) * 100.0,
                (true, false) => iv.lo + p * 50.0,
                (false, true) => iv.hi - p * 50.0,
                (true, true) => iv.lo + p * (iv.hi - iv.lo),
            };
            let back = iv.from_unconstrained(iv.to_unconstrained(x));
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0), "{x} -> {back}");
        }

        #[test]
        fn image_stays_in_bounds(iv in interval_strategy(), u in -800.0..800.0f64) {
            let x = iv.from_unconstrained(u);
            prop_assert!(iv.contains(x));
        }

        #[test]
        fn transform_is_monotone(iv in interval_strategy(), u in -20.0..20.0f64, du in 1e-3..5.0f64) {
            prop_assert!(iv.from_unconstrained(u) <= iv.from_unconstrained(u + du));
        }

        #[test]
        fn derivatives_match_differences(iv in interval_strategy(), u in -4.0..4.0f64) {
            let h = 1e-5;
            let f = |v: f64| iv.from_unconstrained(v);
            let (d1, d2) = iv.derivatives(u);
            let fd1 = (f(u + h) - f(u - h)) / (2.0 * h);
            let fd2 = (f(u + h) - 2.0 * f(u) + f(u - h)) / (h * h);
            prop_assert!((d1 - fd1).abs() <= 1e-6 * (1.0 + d1.abs()));
            prop_assert!((d2 - fd2).abs() <= 1e-3 * (1.0 + d2.abs()));
            prop_assert!((iv.log_jacobian(u) - d1.ln()).abs() < 1e-9);
        }
    }
}
