//! Finite-state hidden Markov model with exact enumeration, for testing
//! samplers against closed-form smoothing distributions.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::rng::RandomStream;
use crate::smc::sample_categorical;
use crate::stats::logsumexp;

pub const MAX_STATES: usize = 5;
pub const MAX_STEPS: usize = 8;

/// States `0..K`; observations are symbol indices stored as `f64`.
#[derive(Clone, Debug)]
pub struct FiniteHmm {
    init: Vec<f64>,
    trans: Vec<Vec<f64>>,
    emit: Vec<Vec<f64>>,
}

fn check_stochastic(rows: &[Vec<f64>], width: usize, what: &str) -> Result<()> {
    for r in rows {
        if r.len() != width || r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::input(format!("{what} row malformed")));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("{what} row does not sum to one")));
        }
    }
    Ok(())
}

impl FiniteHmm {
    pub fn new(init: Vec<f64>, trans: Vec<Vec<f64>>, emit: Vec<Vec<f64>>) -> Result<Self> {
        let k = init.len();
        if k == 0 || k > MAX_STATES || trans.len() != k || emit.len() != k {
            return Err(Error::input(format!("state count must be 1..={MAX_STATES}")));
        }
        let symbols = emit[0].len();
        check_stochastic(std::slice::from_ref(&init), k, "initial")?;
        check_stochastic(&trans, k, "transition")?;
        check_stochastic(&emit, symbols, "emission")?;
        Ok(Self { init, trans, emit })
    }

    /// Random model with strictly positive entries.
    pub fn random(k: usize, symbols: usize, rng: &mut RandomStream) -> Result<Self> {
        let mut row = |w: usize| {
            let v: Vec<f64> = (0..w).map(|_| 0.05 + rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let init = row(k);
        let trans = (0..k).map(|_| row(k)).collect();
        let emit = (0..k).map(|_| row(symbols)).collect();
        Self::new(init, trans, emit)
    }

    pub fn n_states(&self) -> usize {
        self.init.len()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() || data.len() > MAX_STEPS {
            return Err(Error::input(format!("enumeration limited to 1..={MAX_STEPS} steps")));
        }
        Ok(())
    }

    fn emit_ln(&self, y: Option<&[f64]>, x: usize) -> f64 {
        match y {
            Some(y) => self.emit[x].get(y[0] as usize).copied().unwrap_or(0.0).ln(),
            None => 0.0,
        }
    }

    /// Exact `ln p(y_{0:T-1})` by the forward recursion.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        let k = self.n_states();
        let mut alpha: Vec<f64> = (0..k).map(|x| self.init[x].ln() + self.emit_ln(data.observation(0), x)).collect();
        for t in 1..data.len() {
            let next: Vec<f64> = (0..k)
                .map(|x| {
                    let terms: Vec<f64> = (0..k).map(|xp| alpha[xp] + self.trans[xp][x].ln()).collect();
                    logsumexp(&terms) + self.emit_ln(data.observation(t), x)
                })
                .collect();
            alpha = next;
        }
        Ok(logsumexp(&alpha))
    }

    /// Every trajectory with its posterior probability, in lexicographic order.
    pub fn smoothing_distribution(&self, data: &Dataset) -> Result<Vec<(Vec<usize>, f64)>> {
        self.check_data(data)?;
        let k = self.n_states();
        let t_len = data.len();
        let total = k.pow(t_len as u32);
        let mut out = Vec::with_capacity(total);
        let mut lj = Vec::with_capacity(total);
        for code in 0..total {
            let traj = self.decode(code, t_len);
            let mut l = self.init[traj[0]].ln() + self.emit_ln(data.observation(0), traj[0]);
            for t in 1..t_len {
                l += self.trans[traj[t - 1]][traj[t]].ln() + self.emit_ln(data.observation(t), traj[t]);
            }
            lj.push(l);
            out.push(traj);
        }
        let z = logsumexp(&lj);
        Ok(out.into_iter().zip(lj).map(|(x, l)| (x, (l - z).exp())).collect())
    }

    /// Index of a trajectory in [`Self::smoothing_distribution`].
    pub fn encode(&self, traj: &[usize]) -> usize {
        traj.iter().fold(0, |acc, &x| acc * self.n_states() + x)
    }

    fn decode(&self, mut code: usize, t_len: usize) -> Vec<usize> {
        let k = self.n_states();
        let mut v = vec![0; t_len];
        for t in (0..t_len).rev() {
            v[t] = code % k;
            code /= k;
        }
        v
    }
}

impl StateSpaceModel for FiniteHmm {
    type State = usize;

    fn state_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn sample_initial(&self, _theta: &[f64], rng: &mut RandomStream) -> usize {
        sample_categorical(&self.init, rng).expect("stochastic row")
    }

    fn initial_logpdf(&self, x: &usize, _theta: &[f64]) -> Option<f64> {
        Some(self.init[*x].ln())
    }

    fn sample_transition(&self, x_prev: &usize, _u: &[f64], _t: usize, _theta: &[f64], rng: &mut RandomStream) -> usize {
        sample_categorical(&self.trans[*x_prev], rng).expect("stochastic row")
    }

    fn transition_logpdf(&self, x: &usize, x_prev: &usize, _u: &[f64], _t: usize, _theta: &[f64]) -> Option<f64> {
        Some(self.trans[*x_prev][*x].ln())
    }

    fn has_transition_density(&self) -> bool {
        true
    }

    fn observation_logpdf(&self, y: &[f64], x: &usize, _u: &[f64], _t: usize, _theta: &[f64]) -> f64 {
        self.emit_ln(Some(y), *x)
    }

    fn sample_observation(&self, x: &usize, _u: &[f64], _t: usize, _theta: &[f64], rng: &mut RandomStream) -> Vec<f64> {
        vec![sample_categorical(&self.emit[*x], rng).expect("stochastic row") as f64]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_joint;

    #[test]
    fn enumeration_normalizes_and_matches_forward() {
        let mut rng = RandomStream::new(3, 0);
        let m = FiniteHmm::random(3, 2, &mut rng).unwrap();
        let data = Dataset::from_observations(vec![Some(vec![0.0]), None, Some(vec![1.0]), Some(vec![1.0])]).unwrap();
        let dist = m.smoothing_distribution(&data).unwrap();
        assert_eq!(dist.len(), 81);
        let s: f64 = dist.iter().map(|d| d.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let ll = m.log_likelihood(&data).unwrap();
        let (traj, p) = &dist[17];
        assert_eq!(m.encode(traj), 17);
        let lj = log_joint(&m, traj, &data, &[]).unwrap();
        assert!((lj - ll - p.ln()).abs() < 1e-10);
    }

    #[test]
    fn rejects_oversized_problems() {
        let mut rng = RandomStream::new(3, 0);
        assert!(FiniteHmm::random(6, 2, &mut rng).is_err());
        let m = FiniteHmm::random(2, 2, &mut rng).unwrap();
        let data = Dataset::from_observations(vec![Some(vec![0.0]); 9]).unwrap();
        assert!(m.smoothing_distribution(&data).is_err());
    }
}
