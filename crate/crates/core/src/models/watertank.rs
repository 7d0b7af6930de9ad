//! Two cascaded water tanks.
//!
//! The state holds the uncapped levels-plus-inflow `(xᵘ, xˡ)`; every mean map
//! and the observation read the capped levels `x̌ = clamp(x, 0, 10)`.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::dist::normal_logpdf;
use crate::error::{Error, Result};
use crate::model::{
    DeterministicModel, DifferentiableModel, GradHess, LinearizableModel, RealState, StateSpaceModel,
};
use crate::params::{Interval, ParameterVector};
use crate::rng::RandomStream;

pub const TANK_HEIGHT: f64 = 10.0;
/// Floor on the √ argument in derivatives.
pub const SQRT_FLOOR: f64 = 1e-3;

pub const TANK_PARAM_NAMES: [&str; 8] = ["k1", "k2", "k3", "k4", "k5", "k6", "sigma_v2", "sigma_e2"];

/// Estimate reported for the full model.
pub const THETA_HAT: [f64; 8] = [0.0392, 0.0016, 0.0637, -0.0059, 0.0414, 0.2572, 0.0012, 0.0001];
/// Default starting point for identification.
pub const THETA_INIT: [f64; 8] = [0.2, 0.0, 0.2, 0.0, 0.2, 0.2, 0.1, 0.1];

pub type TankState = [f64; 2];

#[inline]
pub fn cap(x: f64) -> f64 {
    x.clamp(0.0, TANK_HEIGHT)
}

#[inline]
fn dcap(x: f64) -> f64 {
    if x > 0.0 && x < TANK_HEIGHT {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn dsqrt(x: f64) -> f64 {
    0.5 / x.max(SQRT_FLOOR).sqrt()
}

/// Regressors: `μ(x, u) = x̌ + Φ(x, u) k`.
#[inline]
pub fn regressors(x: &TankState, u: f64) -> SMatrix<f64, 2, 6> {
    let cu = cap(x[0]);
    let cl = cap(x[1]);
    let su = cu.sqrt();
    let sl = cl.sqrt();
    let over = (x[0] - TANK_HEIGHT).max(0.0);
    SMatrix::<f64, 2, 6>::new(
        -su, -cu, 0.0, 0.0, u, 0.0, //
        su, cu, -sl, -cl, 0.0, over,
    )
}

#[inline]
fn k_of(theta: &[f64]) -> SVector<f64, 6> {
    SVector::<f64, 6>::from_column_slice(&theta[..6])
}

#[inline]
pub fn tank_mean(x: &TankState, u: f64, theta: &[f64]) -> TankState {
    let m = regressors(x, u) * k_of(theta);
    [cap(x[0]) + m[0], cap(x[1]) + m[1]]
}

/// Law of the first state.
#[derive(Clone, Debug, PartialEq)]
pub enum TankInitial {
    /// Point mass.
    Fixed(TankState),
    Gaussian { mean: TankState, var: [f64; 2] },
}

#[derive(Clone, Debug)]
pub struct WaterTank {
    pub initial: TankInitial,
}

impl WaterTank {
    pub fn new(initial: TankInitial) -> Self {
        Self { initial }
    }

    /// `x₁ = [6, y₁]`.
    pub fn for_data(data: &Dataset) -> Result<Self> {
        let y0 = data
            .observation(0)
            .ok_or_else(|| Error::input("first observation needed to fix the initial state"))?;
        Ok(Self::new(TankInitial::Fixed([6.0, y0[0]])))
    }

    pub fn parameters(values: &[f64]) -> Result<ParameterVector> {
        let mut bounds = vec![Interval::REAL; 6];
        bounds.extend([Interval::POSITIVE; 2]);
        ParameterVector::with_bounds(TANK_PARAM_NAMES, values, &bounds)
    }
}

#[inline]
fn u0(u: &[f64]) -> f64 {
    u.first().copied().unwrap_or(0.0)
}

impl StateSpaceModel for WaterTank {
    type State = TankState;

    fn state_dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        TANK_PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn sample_initial(&self, _theta: &[f64], rng: &mut RandomStream) -> TankState {
        match &self.initial {
            TankInitial::Fixed(x) => *x,
            TankInitial::Gaussian { mean, var } => {
                let z0: f64 = StandardNormal.sample(rng);
                let z1: f64 = StandardNormal.sample(rng);
                [mean[0] + var[0].sqrt() * z0, mean[1] + var[1].sqrt() * z1]
            }
        }
    }

    fn initial_logpdf(&self, x: &TankState, _theta: &[f64]) -> Option<f64> {
        Some(match &self.initial {
            TankInitial::Fixed(m) => normal_logpdf(x[0], m[0], 0.0) + normal_logpdf(x[1], m[1], 0.0),
            TankInitial::Gaussian { mean, var } => {
                normal_logpdf(x[0], mean[0], var[0]) + normal_logpdf(x[1], mean[1], var[1])
            }
        })
    }

    fn sample_transition(&self, x_prev: &TankState, u: &[f64], _t: usize, theta: &[f64], rng: &mut RandomStream) -> TankState {
        let m = tank_mean(x_prev, u0(u), theta);
        let s = theta[6].sqrt();
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [m[0] + s * z0, m[1] + s * z1]
    }

    fn transition_logpdf(&self, x: &TankState, x_prev: &TankState, u: &[f64], _t: usize, theta: &[f64]) -> Option<f64> {
        let m = tank_mean(x_prev, u0(u), theta);
        Some(normal_logpdf(x[0], m[0], theta[6]) + normal_logpdf(x[1], m[1], theta[6]))
    }

    fn has_transition_density(&self) -> bool {
        true
    }

    fn observation_logpdf(&self, y: &[f64], x: &TankState, _u: &[f64], _t: usize, theta: &[f64]) -> f64 {
        normal_logpdf(y[0], cap(x[1]), theta[7])
    }

    fn sample_observation(&self, x: &TankState, _u: &[f64], _t: usize, theta: &[f64], rng: &mut RandomStream) -> Vec<f64> {
        let z: f64 = StandardNormal.sample(rng);
        vec![cap(x[1]) + theta[7].sqrt() * z]
    }
}

impl RealState for WaterTank {
    fn to_vector(&self, x: &TankState) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn from_vector(&self, v: &DVector<f64>) -> TankState {
        [v[0], v[1]]
    }
}

impl LinearizableModel for WaterTank {
    fn initial_moments(&self, _theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        match &self.initial {
            TankInitial::Fixed(m) => (DVector::from_column_slice(m), DMatrix::zeros(2, 2)),
            TankInitial::Gaussian { mean, var } => (
                DVector::from_column_slice(mean),
                DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            ),
        }
    }

    fn transition_mean(&self, x: &DVector<f64>, u: &[f64], _t: usize, theta: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&tank_mean(&[x[0], x[1]], u0(u), theta))
    }

    fn transition_jacobian(&self, x: &DVector<f64>, _u: &[f64], _t: usize, theta: &[f64]) -> DMatrix<f64> {
        let (k1, k2, k3, k4, k6) = (theta[0], theta[1], theta[2], theta[3], theta[5]);
        let (cu, cl) = (cap(x[0]), cap(x[1]));
        let (du, dl) = (dcap(x[0]), dcap(x[1]));
        let over = if x[0] > TANK_HEIGHT { 1.0 } else { 0.0 };
        DMatrix::from_row_slice(
            2,
            2,
            &[
                du * (1.0 - k1 * dsqrt(cu) - k2),
                0.0,
                du * (k1 * dsqrt(cu) + k2) + k6 * over,
                dl * (1.0 - k3 * dsqrt(cl) - k4),
            ],
        )
    }

    fn transition_cov(&self, _t: usize, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * theta[6]
    }

    fn observation_mean(&self, x: &DVector<f64>, _u: &[f64], _t: usize, _theta: &[f64]) -> DVector<f64> {
        DVector::from_element(1, cap(x[1]))
    }

    fn observation_jacobian(&self, x: &DVector<f64>, _u: &[f64], _t: usize, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[0.0, dcap(x[1])])
    }

    fn observation_cov(&self, _t: usize, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, theta[7])
    }
}

impl DeterministicModel for WaterTank {
    fn mean_transition(&self, x: &TankState, u: &[f64], _t: usize, theta: &[f64]) -> TankState {
        tank_mean(x, u0(u), theta)
    }

    fn mean_observation(&self, x: &TankState, _u: &[f64], _t: usize, _theta: &[f64]) -> Vec<f64> {
        vec![cap(x[1])]
    }
}

impl DifferentiableModel for WaterTank {
    fn transition_grad(&self, x: &TankState, x_prev: &TankState, u: &[f64], _t: usize, theta: &[f64]) -> GradHess {
        let phi = regressors(x_prev, u0(u));
        let m = tank_mean(x_prev, u0(u), theta);
        let r = SVector::<f64, 2>::new(x[0] - m[0], x[1] - m[1]);
        let v = theta[6];
        let rr = r.norm_squared();
        let mut out = GradHess::zeros(8);
        let gk = phi.transpose() * r / v;
        let hk = -(phi.transpose() * phi) / v;
        for i in 0..6 {
            out.grad[i] = gk[i];
            out.hess[(i, 6)] = -gk[i] / v;
            out.hess[(6, i)] = -gk[i] / v;
            for j in 0..6 {
                out.hess[(i, j)] = hk[(i, j)];
            }
        }
        out.grad[6] = -1.0 / v + rr / (2.0 * v * v);
        out.hess[(6, 6)] = 1.0 / (v * v) - rr / (v * v * v);
        out
    }

    fn observation_grad(&self, y: &[f64], x: &TankState, _u: &[f64], _t: usize, theta: &[f64]) -> GradHess {
        let r = y[0] - cap(x[1]);
        let v = theta[7];
        let mut out = GradHess::zeros(8);
        out.grad[7] = -0.5 / v + r * r / (2.0 * v * v);
        out.hess[(7, 7)] = 0.5 / (v * v) - r * r / (v * v * v);
        out
    }
}

/// Per-trajectory statistics of the linear-in-k complete-data likelihood:
/// `Σ ΦᵀΦ`, `Σ ΦᵀΔ`, `Σ ΔᵀΔ` with `Δ = x_t − x̌_{t-1}`, the number of
/// transitions, `Σ (y − x̌ˡ)²` and the number of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct TankStats {
    pub ptp: SMatrix<f64, 6, 6>,
    pub ptd: SVector<f64, 6>,
    pub dtd: f64,
    pub n_trans: f64,
    pub obs_ss: f64,
    pub n_obs: f64,
}

impl TankStats {
    pub const LEN: usize = 36 + 6 + 4;

    pub fn zeros() -> Self {
        Self {
            ptp: SMatrix::zeros(),
            ptd: SVector::zeros(),
            dtd: 0.0,
            n_trans: 0.0,
            obs_ss: 0.0,
            n_obs: 0.0,
        }
    }

    pub fn from_trajectory(traj: &[TankState], data: &Dataset) -> Self {
        let mut s = Self::zeros();
        for t in 0..traj.len() {
            if t > 0 {
                let phi = regressors(&traj[t - 1], u0(data.input(t)));
                let d = SVector::<f64, 2>::new(traj[t][0] - cap(traj[t - 1][0]), traj[t][1] - cap(traj[t - 1][1]));
                s.ptp += phi.transpose() * phi;
                s.ptd += phi.transpose() * d;
                s.dtd += d.norm_squared();
                s.n_trans += 1.0;
            }
            if let Some(y) = data.observation(t) {
                s.obs_ss += (y[0] - cap(traj[t][1])).powi(2);
                s.n_obs += 1.0;
            }
        }
        s
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(self.ptp.as_slice());
        v.extend_from_slice(self.ptd.as_slice());
        v.extend([self.dtd, self.n_trans, self.obs_ss, self.n_obs]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            ptp: SMatrix::from_column_slice(&v[..36]),
            ptd: SVector::from_column_slice(&v[36..42]),
            dtd: v[42],
            n_trans: v[43],
            obs_ss: v[44],
            n_obs: v[45],
        }
    }

    /// Transition residual sum of squares at `k`.
    pub fn residual_ss(&self, k: &SVector<f64, 6>) -> f64 {
        (self.dtd - 2.0 * k.dot(&self.ptd) + (k.transpose() * self.ptp * k)[0]).max(0.0)
    }

    /// Least squares for the free k's with the fixed ones held, then the
    /// variance updates. A singular normal matrix falls back to a pseudo-inverse.
    pub fn maximize(&self, theta: &ParameterVector) -> Result<ParameterVector> {
        let vals = theta.values();
        let free_k: Vec<usize> = (0..6).filter(|&i| !theta.is_fixed(i)).collect();
        let mut k = k_of(vals);
        if !free_k.is_empty() {
            let fixed: Vec<usize> = (0..6).filter(|&i| theta.is_fixed(i)).collect();
            let nf = free_k.len();
            let a = DMatrix::from_fn(nf, nf, |i, j| self.ptp[(free_k[i], free_k[j])]);
            let b = DVector::from_fn(nf, |i, _| {
                self.ptd[free_k[i]] - fixed.iter().map(|&j| self.ptp[(free_k[i], j)] * k[j]).sum::<f64>()
            });
            let sol = match a.clone().cholesky() {
                Some(ch) => ch.solve(&b),
                None => a
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::Numerical { step: 0, message: e.to_string() })?
                    * b,
            };
            for (i, &fi) in free_k.iter().enumerate() {
                k[fi] = sol[i];
            }
        }
        let mut out = vals.to_vec();
        out[..6].copy_from_slice(k.as_slice());
        if !theta.is_fixed(6) && self.n_trans > 0.0 {
            out[6] = (self.residual_ss(&k) / (2.0 * self.n_trans)).max(1e-12);
        }
        if !theta.is_fixed(7) && self.n_obs > 0.0 {
            out[7] = (self.obs_ss / self.n_obs).max(1e-12);
        }
        let mut p = theta.clone();
        for (i, &v) in out.iter().enumerate() {
            p.set_at(i, v)?;
        }
        Ok(p)
    }
}

/// Multisine with random phases over harmonics `1..=n_harmonics` of the
/// record length, affinely mapped onto `[lo, hi]`.
pub fn multisine(n: usize, n_harmonics: usize, lo: f64, hi: f64, rng: &mut RandomStream) -> Vec<f64> {
    let phases: Vec<f64> = (0..n_harmonics)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|t| {
            phases
                .iter()
                .enumerate()
                .map(|(k, ph)| (std::f64::consts::TAU * (k + 1) as f64 * t as f64 / n as f64 + ph).cos())
                .sum()
        })
        .collect();
    let (mn, mx) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    raw.iter().map(|v| lo + (hi - lo) * (v - mn) / (mx - mn)).collect()
}

/// Synthetic estimation and validation records generated at `theta`, each
/// from its own multisine input, with `x₁ = [6, y₁]`-style initial levels.
pub fn synthetic_tank_data(n: usize, theta: &[f64], rng: &mut RandomStream) -> Result<(Dataset, Dataset)> {
    let make = |rng: &mut RandomStream| -> Result<Dataset> {
        // harmonics up to 0.0144 Hz at a 4 s sampling period
        let harmonics = ((0.0144 * 4.0 * n as f64).floor() as usize).max(1);
        let u = multisine(n, harmonics, 1.0, 5.0, rng);
        let model = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let inputs: Vec<Vec<f64>> = u.iter().map(|&v| vec![v]).collect();
        let (_, data) = crate::model::simulate(&model, &inputs, theta, rng)?;
        Ok(data)
    };
    let est = make(rng)?;
    let val = make(rng)?;
    Ok((est, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_tank_fixed_point() {
        let m = tank_mean(&[0.0, 0.0], 0.0, &THETA_HAT);
        assert_eq!(m, [0.0, 0.0]);
    }

    #[test]
    fn overflow_term() {
        let th = THETA_HAT;
        let m = tank_mean(&[12.0, 4.0], 1.0, &th);
        let upper = 10.0 - th[0] * 10f64.sqrt() + th[4] - th[1] * 10.0;
        let lower = 4.0 + th[0] * 10f64.sqrt() - th[2] * 2.0 + th[1] * 10.0 - th[3] * 4.0 + th[5] * 2.0;
        assert!((m[0] - upper).abs() < 1e-14);
        assert!((m[1] - lower).abs() < 1e-14);
    }

    #[test]
    fn jacobian_matches_finite_differences_away_from_kinks() {
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let th = THETA_HAT;
        for x in [[3.0, 4.0], [11.0, 2.0], [7.5, 9.0]] {
            let j = m.transition_jacobian(&DVector::from_column_slice(&x), &[2.0], 1, &th);
            let h = 1e-6;
            for c in 0..2 {
                let mut p = x;
                let mut q = x;
                p[c] += h;
                q[c] -= h;
                let fp = tank_mean(&p, 2.0, &th);
                let fq = tank_mean(&q, 2.0, &th);
                for r in 0..2 {
                    assert!(((fp[r] - fq[r]) / (2.0 * h) - j[(r, c)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let th = [0.05, 0.01, 0.06, -0.01, 0.04, 0.25, 0.01, 0.02];
        let (xp, x, y, u) = ([10.5, 4.0], [10.3, 4.2], [4.3], [2.5]);
        let f = |t: &[f64]| m.transition_logpdf(&x, &xp, &u, 1, t).unwrap() + m.observation_logpdf(&y, &x, &u, 1, t);
        let g = |t: &[f64]| {
            let mut g = m.transition_grad(&x, &xp, &u, 1, t);
            g.add_assign(&m.observation_grad(&y, &x, &u, 1, t));
            g
        };
        let g0 = g(&th);
        let h = 1e-6;
        for i in 0..8 {
            let mut p = th;
            let mut q = th;
            p[i] += h;
            q[i] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - g0.grad[i]).abs() < 1e-4 * (1.0 + fd.abs()), "grad {i}: {fd} vs {}", g0.grad[i]);
            let (gp, gq) = (g(&p), g(&q));
            for j in 0..8 {
                let fdh = (gp.grad[j] - gq.grad[j]) / (2.0 * h);
                assert!((fdh - g0.hess[(i, j)]).abs() < 1e-4 * (1.0 + fdh.abs()), "hess {i},{j}");
            }
        }
    }

    #[test]
    fn stats_reproduce_transition_log_density() {
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let mut rng = RandomStream::new(8, 0);
        let inputs: Vec<Vec<f64>> = (0..30).map(|t| vec![2.0 + (t as f64 * 0.3).sin()]).collect();
        let (xs, data) = crate::model::simulate(&m, &inputs, &THETA_HAT, &mut rng).unwrap();
        let s = TankStats::from_trajectory(&xs, &data);
        let th = THETA_INIT;
        let direct: f64 = (1..30).map(|t| m.transition_logpdf(&xs[t], &xs[t - 1], &inputs[t], t, &th).unwrap()).sum();
        let via = -s.n_trans * (2.0 * std::f64::consts::PI * th[6]).ln() - s.residual_ss(&k_of(&th)) / (2.0 * th[6]);
        assert!((direct - via).abs() < 1e-8);
        let rt = TankStats::from_slice(&s.to_vec());
        assert_eq!(rt, s);
    }

    #[test]
    fn maximize_beats_nearby_points() {
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let mut rng = RandomStream::new(9, 0);
        let u = multisine(300, 4, 1.0, 5.0, &mut rng);
        let inputs: Vec<Vec<f64>> = u.iter().map(|&v| vec![v]).collect();
        let (xs, data) = crate::model::simulate(&m, &inputs, &THETA_HAT, &mut rng).unwrap();
        let s = TankStats::from_trajectory(&xs, &data);
        let p0 = WaterTank::parameters(&THETA_INIT).unwrap();
        let best = s.maximize(&p0).unwrap();
        let q = |th: &[f64]| -> f64 {
            let mut l = 0.0;
            for t in 1..xs.len() {
                l += m.transition_logpdf(&xs[t], &xs[t - 1], &inputs[t], t, th).unwrap();
            }
            for t in 0..xs.len() {
                l += m.observation_logpdf(data.observation(t).unwrap(), &xs[t], &inputs[t], t, th);
            }
            l
        };
        let b = best.values().to_vec();
        let qb = q(&b);
        for i in 0..8 {
            for d in [-1e-3, 1e-3] {
                let mut p = b.clone();
                p[i] += d * if i >= 6 { b[i] } else { 1.0 };
                assert!(q(&p) <= qb + 1e-9);
            }
        }
    }

    #[test]
    fn maximize_respects_fixed_entries() {
        let s = {
            let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
            let mut rng = RandomStream::new(10, 0);
            let inputs: Vec<Vec<f64>> = (0..100).map(|t| vec![3.0 + (t as f64 * 0.1).sin()]).collect();
            let (xs, data) = crate::model::simulate(&m, &inputs, &THETA_HAT, &mut rng).unwrap();
            TankStats::from_trajectory(&xs, &data)
        };
        let mut p0 = WaterTank::parameters(&THETA_INIT).unwrap();
        for i in [1, 3, 5] {
            p0.set_fixed(TANK_PARAM_NAMES[i], true).unwrap();
        }
        let p = s.maximize(&p0).unwrap();
        for i in [1, 3, 5] {
            assert_eq!(p.values()[i], THETA_INIT[i]);
        }
    }

    proptest! {
        #[test]
        fn observation_mean_is_capped(xu in -50.0..50.0f64, xl in -50.0..50.0f64, u in 0.0..10.0f64) {
            let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
            let next = tank_mean(&[xu, xl], u, &THETA_HAT);
            for v in [next, [xu, xl]] {
                let y = m.mean_observation(&v, &[u], 1, &THETA_HAT)[0];
                prop_assert!((0.0..=10.0).contains(&y));
                prop_assert!((0.0..=10.0).contains(&cap(v[0])));
            }
        }
    }
}
