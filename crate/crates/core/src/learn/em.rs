//! Expectation maximization: exact for linear-Gaussian models, particle-based
//! and stochastic-approximation (PSAEM) otherwise.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{kalman_loglik, rts_smoother, LgssSpec};
use crate::model::StateSpaceModel;
use crate::models::watertank::{TankStats, WaterTank};
use crate::models::{Lgss, LgssParam};
use crate::params::ParameterVector;
use crate::rng::RandomStream;
use crate::smc::{csmc_run, smc_run, Bootstrap, SmcConfig};

/// Exact-EM iterates and their Kalman log-likelihoods; entry 0 is the start.
#[derive(Clone, Debug)]
pub struct LgssEmTrace {
    pub specs: Vec<LgssSpec<f64>>,
    pub loglik: Vec<f64>,
}

/// Inverse of a symmetric PSD matrix, ridge-regularized when singular.
fn regularized_inverse(m: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    if let Some(c) = m.clone().cholesky() {
        return c.inverse();
    }
    let n = m.nrows();
    let ridge = 1e-10 * (m.trace().abs() / n as f64).max(1.0);
    log::warn!("singular {what} statistics; adding ridge {ridge:e}");
    let reg = m + DMatrix::identity(n, n) * ridge;
    reg.clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| reg.pseudo_inverse(1e-12).expect("non-negative tolerance"))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Smoothed second moments; transition sums use `z_t = x_t − B u_t` and
/// observation sums use `ỹ_t = y_t − D u_t`.
struct LgssMoments {
    s11: DMatrix<f64>,
    s10: DMatrix<f64>,
    s00: DMatrix<f64>,
    n_trans: f64,
    sxx: DMatrix<f64>,
    syx: DMatrix<f64>,
    syy: DMatrix<f64>,
    n_obs: f64,
}

fn lgss_moments(spec: &LgssSpec<f64>, data: &Dataset) -> Result<LgssMoments> {
    let sm = rts_smoother(spec, data)?;
    let (nx, ny) = (spec.state_dim(), spec.obs_dim());
    let mut m = LgssMoments {
        s11: DMatrix::zeros(nx, nx),
        s10: DMatrix::zeros(nx, nx),
        s00: DMatrix::zeros(nx, nx),
        n_trans: 0.0,
        sxx: DMatrix::zeros(nx, nx),
        syx: DMatrix::zeros(ny, nx),
        syy: DMatrix::zeros(ny, ny),
        n_obs: 0.0,
    };
    for t in 0..data.len() {
        let s = &sm.smoothed[t];
        let u = DVector::from_column_slice(data.input(t));
        let exx = &s.cov + &s.mean * s.mean.transpose();
        if t > 0 {
            let prev = &sm.smoothed[t - 1];
            let zm = &s.mean - &spec.b * &u;
            m.s11 += &s.cov + &zm * zm.transpose();
            m.s10 += &sm.cross[t - 1] + &zm * prev.mean.transpose();
            m.s00 += &prev.cov + &prev.mean * prev.mean.transpose();
            m.n_trans += 1.0;
        }
        if let Some(y) = data.observation(t) {
            let yt = DVector::from_column_slice(y) - &spec.d * &u;
            m.sxx += &exx;
            m.syx += &yt * s.mean.transpose();
            m.syy += &yt * yt.transpose();
            m.n_obs += 1.0;
        }
    }
    Ok(m)
}

/// Exact EM over the blocks in `free` (any of A, C, Q, R); B and D stay known.
/// Each step maximizes the expected complete-data log-likelihood exactly.
pub fn pem_lgss(template: &LgssSpec<f64>, free: &[LgssParam], data: &Dataset, iters: usize) -> Result<LgssEmTrace> {
    template.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    if let Some(p) = free.iter().find(|p| matches!(p, LgssParam::B | LgssParam::D)) {
        return Err(Error::input(format!("exact EM does not update {}", p.name())));
    }
    let has = |p: LgssParam| free.contains(&p);
    let mut spec = template.clone();
    let mut trace = LgssEmTrace {
        specs: vec![spec.clone()],
        loglik: vec![kalman_loglik(&spec, data)?],
    };
    for _ in 0..iters {
        let m = lgss_moments(&spec, data)?;
        if m.n_trans > 0.0 {
            if has(LgssParam::A) {
                spec.a = &m.s10 * regularized_inverse(&m.s00, "transition");
            }
            if has(LgssParam::Q) {
                let a = &spec.a;
                let ss = &m.s11 - a * m.s10.transpose() - &m.s10 * a.transpose() + a * &m.s00 * a.transpose();
                spec.q = symmetrize(ss / m.n_trans);
            }
        }
        if m.n_obs > 0.0 {
            if has(LgssParam::C) {
                spec.c = &m.syx * regularized_inverse(&m.sxx, "observation");
            }
            if has(LgssParam::R) {
                let c = &spec.c;
                let ss = &m.syy - c * m.syx.transpose() - &m.syx * c.transpose() + c * &m.sxx * c.transpose();
                spec.r = symmetrize(ss / m.n_obs);
            }
        }
        trace.loglik.push(kalman_loglik(&spec, data)?);
        trace.specs.push(spec.clone());
    }
    Ok(trace)
}

/// Models with a closed-form maximizer of the expected complete-data
/// log-likelihood, expressed through additive sufficient statistics.
pub trait EmModel: StateSpaceModel {
    /// Statistics of one trajectory; weighted sums of these are maximized.
    fn sufficient_stats(&self, traj: &[Self::State], data: &Dataset, theta: &[f64]) -> Result<Vec<f64>>;

    /// Maximizer over the free entries of `theta`; fixed entries are kept.
    fn maximize(&self, stats: &[f64], theta: &ParameterVector) -> Result<ParameterVector>;
}

impl EmModel for WaterTank {
    fn sufficient_stats(&self, traj: &[[f64; 2]], data: &Dataset, _theta: &[f64]) -> Result<Vec<f64>> {
        Ok(TankStats::from_trajectory(traj, data).to_vec())
    }

    fn maximize(&self, stats: &[f64], theta: &ParameterVector) -> Result<ParameterVector> {
        if stats.len() != TankStats::LEN {
            return Err(Error::input("tank statistics have the wrong length"));
        }
        TankStats::from_slice(stats).maximize(theta)
    }
}

/// Scalar LGSS with free entries among a, c, q, r; b and d are held at θ.
/// Statistics: Σx²₋, Σz x₋, Σz², n_trans, Σx², Σỹx, Σỹ², n_obs.
impl EmModel for Lgss {
    fn sufficient_stats(&self, traj: &[Vec<f64>], data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
        let s = self.spec_at(theta);
        if s.state_dim() != 1 || s.obs_dim() != 1 {
            return Err(Error::capability("particle EM supports scalar LGSS only"));
        }
        if traj.len() != data.len() {
            return Err(Error::input("trajectory and data lengths differ"));
        }
        let mut st = vec![0.0; 8];
        for t in 0..data.len() {
            let u = data.input(t);
            let x = traj[t][0];
            if t > 0 {
                let xp = traj[t - 1][0];
                let z = x - s.predict_mean(&DVector::zeros(1), u)?[0];
                st[0] += xp * xp;
                st[1] += z * xp;
                st[2] += z * z;
                st[3] += 1.0;
            }
            if let Some(y) = data.observation(t) {
                let yt = y[0] - s.observe_mean(&DVector::zeros(1), u)?[0];
                st[4] += x * x;
                st[5] += yt * x;
                st[6] += yt * yt;
                st[7] += 1.0;
            }
        }
        Ok(st)
    }

    fn maximize(&self, st: &[f64], theta: &ParameterVector) -> Result<ParameterVector> {
        if st.len() != 8 {
            return Err(Error::input("LGSS statistics have the wrong length"));
        }
        let mut out = theta.clone();
        let free = |name: &str| theta.index(name).filter(|&i| !theta.is_fixed(i));
        let spec = self.spec_at(theta.values());
        let mut a = spec.a[(0, 0)];
        if let Some(i) = free(LgssParam::A.name()) {
            if !(st[0] > 0.0) {
                return Err(Error::Domain("no transition information for a".into()));
            }
            a = st[1] / st[0];
            out.set_at(i, a)?;
        }
        if let Some(i) = free(LgssParam::Q.name()) {
            let q = (st[2] - 2.0 * a * st[1] + a * a * st[0]) / st[3];
            if !(q > 0.0) {
                return Err(Error::Domain(format!("q update {q} not positive")));
            }
            out.set_at(i, q)?;
        }
        let mut c = spec.c[(0, 0)];
        if let Some(i) = free(LgssParam::C.name()) {
            if !(st[4] > 0.0) {
                return Err(Error::Domain("no observation information for c".into()));
            }
            c = st[5] / st[4];
            out.set_at(i, c)?;
        }
        if let Some(i) = free(LgssParam::R.name()) {
            let r = (st[6] - 2.0 * c * st[5] + c * c * st[4]) / st[7];
            if !(r > 0.0) {
                return Err(Error::Domain(format!("r update {r} not positive")));
            }
            out.set_at(i, r)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub iters: usize,
    pub n_particles: usize,
    /// `γ_k = k^(−step_exponent)`; 0 turns PSAEM into plain conditional-particle EM.
    pub step_exponent: f64,
    /// Leading iterations with `γ = 1`; the decay restarts after them.
    pub full_steps: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iters: 50,
            n_particles: 50,
            step_exponent: 0.7,
            full_steps: 0,
        }
    }
}

/// `step` holds `γ_k`; `accepted` is false when the M-step failed.
pub use super::gradient::SearchRecord as EmRecord;

/// Step-size sequence `γ_k = k^(−exponent)` for `k ≥ 1`.
pub fn step_size(k: usize, exponent: f64) -> f64 {
    (k as f64).powf(-exponent)
}

impl EmConfig {
    /// `γ_k` with the leading full steps applied.
    pub fn gamma(&self, k: usize) -> f64 {
        if k <= self.full_steps {
            1.0
        } else {
            step_size(k - self.full_steps, self.step_exponent)
        }
    }
}

fn weighted_stats<M: EmModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    trajs: impl Iterator<Item = (Vec<M::State>, f64)>,
) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    for (traj, w) in trajs {
        if w == 0.0 {
            continue;
        }
        let s = model.sufficient_stats(&traj, data, theta)?;
        if acc.is_empty() {
            acc = vec![0.0; s.len()];
        }
        for (a, v) in acc.iter_mut().zip(&s) {
            *a += w * v;
        }
    }
    Ok(acc)
}

fn apply_m_step<M: EmModel>(model: &M, stats: &[f64], theta: &ParameterVector, k: usize) -> (ParameterVector, bool) {
    match model.maximize(stats, theta) {
        Ok(t) if t.values().iter().all(|v| v.is_finite()) => (t, true),
        Ok(_) => {
            log::warn!("iteration {k}: non-finite M-step result, keeping θ");
            (theta.clone(), false)
        }
        Err(e) => {
            log::warn!("iteration {k}: M-step failed ({e}), keeping θ");
            (theta.clone(), false)
        }
    }
}

/// Particle EM: each iteration smooths with a fresh bootstrap filter
/// (genealogy-traced trajectories weighted by the final weights) and maximizes.
pub fn particle_em<M: EmModel>(
    model: &M,
    data: &Dataset,
    theta0: &ParameterVector,
    config: &EmConfig,
    rng: &mut RandomStream,
) -> Result<(ParameterVector, Vec<EmRecord>)> {
    let mut theta = theta0.clone();
    let mut trace = Vec::with_capacity(config.iters);
    let cfg = SmcConfig::new(config.n_particles).with_history();
    for k in 1..=config.iters {
        let out = smc_run(model, data, theta.values(), &Bootstrap, None, &cfg, rng)?;
        let hist = out.history.as_ref().expect("history requested");
        let w = &out.ensemble.norm_weights;
        let stats = weighted_stats(model, data, theta.values(), (0..w.len()).map(|i| (hist.trace(i), w[i])))?;
        let (next, ok) = apply_m_step(model, &stats, &theta, k);
        theta = next;
        trace.push(EmRecord {
            iter: k,
            theta: theta.values().to_vec(),
            log_z: out.log_z(),
            step: 1.0,
            accepted: ok,
        });
    }
    Ok((theta, trace))
}

/// Stochastic-approximation EM driven by conditional SMC with ancestor
/// sampling. The surrogate is `S_k = (1 − γ_k) S_{k−1} + γ_k Σ_i w^i s(x^i)`
/// over the sweep's weighted trajectories, and `θ_k` maximizes `S_k`.
pub fn psaem<M: EmModel>(
    model: &M,
    data: &Dataset,
    theta0: &ParameterVector,
    config: &EmConfig,
    rng: &mut RandomStream,
) -> Result<(ParameterVector, Vec<EmRecord>)> {
    if config.step_exponent < 0.0 || config.step_exponent > 1.0 {
        return Err(Error::input("step exponent must lie in [0, 1]"));
    }
    let mut theta = theta0.clone();
    let init = smc_run(
        model,
        data,
        theta.values(),
        &Bootstrap,
        None,
        &SmcConfig::new(config.n_particles).with_history(),
        rng,
    )?;
    let pick = crate::smc::sample_categorical(&init.ensemble.norm_weights, rng)?;
    let mut reference = init.history.as_ref().expect("history requested").trace(pick);
    let mut surrogate: Vec<f64> = Vec::new();
    let mut trace = Vec::with_capacity(config.iters);
    for k in 1..=config.iters {
        let gamma = config.gamma(k);
        let sweep_seed = rng.next_u64();
        let out = csmc_run(
            model,
            data,
            theta.values(),
            &reference,
            config.n_particles,
            true,
            &mut RandomStream::new(sweep_seed, 0),
        )?;
        let w = &out.final_weights;
        let stats = weighted_stats(model, data, theta.values(), (0..w.len()).map(|i| (out.history.trace(i), w[i])))?;
        if surrogate.is_empty() {
            surrogate = stats;
        } else {
            for (s, v) in surrogate.iter_mut().zip(&stats) {
                *s = (1.0 - gamma) * *s + gamma * v;
            }
        }
        let (next, ok) = apply_m_step(model, &surrogate, &theta, k);
        theta = next;
        reference = out.trajectory;
        trace.push(EmRecord {
            iter: k,
            theta: theta.values().to_vec(),
            log_z: out.log_z,
            step: gamma,
            accepted: ok,
        });
    }
    Ok((theta, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::watertank::{synthetic_tank_data, TankInitial, THETA_HAT, THETA_INIT};
    use rand::Rng;

    fn scalar_data(t: usize, seed: u64) -> (Lgss, Dataset) {
        let m = Lgss::scalar(0.8, 1.0, 0.5, 0.4, 0.0, 1.0, &[LgssParam::A, LgssParam::Q, LgssParam::R]).unwrap();
        let (_, d) = crate::model::simulate(&m, &vec![Vec::new(); t], &[0.8, 0.5, 0.4], &mut RandomStream::new(seed, 0)).unwrap();
        (m, d)
    }

    #[test]
    fn exact_em_is_monotone() {
        let (_, d) = scalar_data(100, 1);
        let start = LgssSpec::scalar(0.1, 1.0, 2.0, 2.0, 0.0, 1.0);
        let tr = pem_lgss(&start, &[LgssParam::A, LgssParam::Q, LgssParam::R], &d, 50).unwrap();
        assert_eq!(tr.loglik.len(), 51);
        for w in tr.loglik.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} < {}", w[1], w[0]);
        }
    }

    #[test]
    fn exact_em_random_starts_improve() {
        let (_, d) = scalar_data(80, 2);
        let mut rng = RandomStream::new(3, 0);
        for _ in 0..10 {
            let start = LgssSpec::scalar(
                rng.random_range(-0.9..0.9),
                rng.random_range(0.5..2.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                0.0,
                1.0,
            );
            let tr = pem_lgss(&start, &[LgssParam::A, LgssParam::C, LgssParam::Q, LgssParam::R], &d, 20).unwrap();
            assert!(tr.loglik.last().unwrap() >= &tr.loglik[0]);
        }
    }

    #[test]
    fn exact_em_two_dimensional_with_inputs_and_gaps() {
        let spec = LgssSpec::<f64> {
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.7]),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.3]),
            d: DMatrix::from_element(1, 1, 0.2),
            q: DMatrix::identity(2, 2) * 0.3,
            r: DMatrix::from_element(1, 1, 0.5),
            mu1: DVector::zeros(2),
            sigma1: DMatrix::identity(2, 2),
        };
        let m = Lgss::new(spec.clone()).unwrap();
        let inputs: Vec<Vec<f64>> = (0..120).map(|t| vec![(t as f64 / 7.0).sin()]).collect();
        let (_, d) = crate::model::simulate(&m, &inputs, &[], &mut RandomStream::new(4, 0)).unwrap();
        let mut obs = d.observations().to_vec();
        for t in (5..120).step_by(9) {
            obs[t] = None;
        }
        let d = Dataset::new(inputs, obs).unwrap();
        let mut start = spec.clone();
        start.a = DMatrix::identity(2, 2) * 0.5;
        start.q = DMatrix::identity(2, 2);
        start.r = DMatrix::from_element(1, 1, 2.0);
        let tr = pem_lgss(&start, &[LgssParam::A, LgssParam::C, LgssParam::Q, LgssParam::R], &d, 30).unwrap();
        for w in tr.loglik.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(pem_lgss(&start, &[LgssParam::B], &d, 1).is_err());
    }

    #[test]
    fn truth_start_does_not_decrease() {
        let (_, d) = scalar_data(60, 5);
        let truth = LgssSpec::scalar(0.8, 1.0, 0.5, 0.4, 0.0, 1.0);
        let tr = pem_lgss(&truth, &[LgssParam::Q], &d, 1).unwrap();
        assert!(tr.loglik[1] >= tr.loglik[0] - 1e-9);
    }

    #[test]
    fn lgss_stats_maximizer_matches_exact_em_given_smoothed_draws() {
        // with one trajectory the maximizer is the least-squares fit
        let (m, _) = scalar_data(3, 6);
        let data = Dataset::scalar(&[0.0; 3], &[1.0, 2.0, 0.5]).unwrap();
        let traj = vec![vec![1.0], vec![2.0], vec![1.0]];
        let st = m.sufficient_stats(&traj, &data, &[0.8, 0.5, 0.4]).unwrap();
        let th = m.maximize(&st, &m.default_parameters()).unwrap();
        let a: f64 = (2.0 * 1.0 + 1.0 * 2.0) / (1.0 + 4.0);
        let q = ((2.0 - a).powi(2) + (1.0 - 2.0 * a).powi(2)) / 2.0;
        let r = (0.0 + 0.0 + 0.25) / 3.0;
        assert!((th.values()[0] - a).abs() < 1e-12);
        assert!((th.values()[1] - q).abs() < 1e-12);
        assert!((th.values()[2] - r).abs() < 1e-12);
    }

    #[test]
    fn full_step_psaem_tracks_particle_em_fixed_point() {
        // γ = 1 keeps no memory: repeated sweeps should settle where exact EM does
        let m = Lgss::scalar(0.8, 1.0, 0.5, 0.4, 0.0, 1.0, &[LgssParam::Q]).unwrap();
        let (_, d) = crate::model::simulate(&m, &vec![Vec::new(); 200], &[0.5], &mut RandomStream::new(7, 0)).unwrap();
        let exact = pem_lgss(&m.spec_at(&[2.0]), &[LgssParam::Q], &d, 200).unwrap();
        let q_ml = exact.specs.last().unwrap().q[(0, 0)];
        let cfg = EmConfig { iters: 60, n_particles: 200, step_exponent: 0.0, full_steps: 0 };
        let th0 = m.default_parameters().with_free_values(&[2.0]);
        let (_, tr) = psaem(&m, &d, &th0, &cfg, &mut RandomStream::new(8, 0)).unwrap();
        let tail: f64 = tr[40..].iter().map(|r| r.theta[0]).sum::<f64>() / 20.0;
        assert!((tail - q_ml).abs() < 0.2 * q_ml, "{tail} vs {q_ml}");
    }

    #[test]
    fn psaem_lgss_converges_to_ml() {
        let m = Lgss::scalar(0.8, 1.0, 0.5, 0.4, 0.0, 1.0, &[LgssParam::Q]).unwrap();
        let (_, d) = crate::model::simulate(&m, &vec![Vec::new(); 200], &[0.5], &mut RandomStream::new(9, 0)).unwrap();
        let grid_ml = (1..=3000)
            .map(|i| i as f64 * 1e-3)
            .map(|q| (q, kalman_loglik(&m.spec_at(&[q]), &d).unwrap()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        let cfg = EmConfig { iters: 100, n_particles: 20, ..Default::default() };
        let th0 = m.default_parameters().with_free_values(&[2.5]);
        let (th, _) = psaem(&m, &d, &th0, &cfg, &mut RandomStream::new(10, 0)).unwrap();
        assert!((th.values()[0] - grid_ml).abs() < 0.2 * grid_ml, "{} vs {grid_ml}", th.values()[0]);
    }

    #[test]
    fn tank_m_step_failure_keeps_theta() {
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let th = WaterTank::parameters(&THETA_INIT).unwrap();
        let (t, ok) = apply_m_step(&m, &[0.0; 3], &th, 1);
        assert!(!ok);
        assert_eq!(t.values(), th.values());
    }

    #[test]
    fn tank_psaem_moves_towards_truth() {
        let (est, _) = synthetic_tank_data(300, &THETA_HAT, &mut RandomStream::new(11, 0)).unwrap();
        let m = WaterTank::for_data(&est).unwrap();
        let th0 = WaterTank::parameters(&THETA_INIT).unwrap();
        let cfg = EmConfig { iters: 20, n_particles: 30, ..Default::default() };
        let (th, tr) = psaem(&m, &est, &th0, &cfg, &mut RandomStream::new(12, 0)).unwrap();
        assert_eq!(tr.len(), 20);
        // σ_e² starts 1000× too large
        assert!(th.values()[7] < 0.01, "{:?}", th.values());
    }

    #[test]
    fn step_sizes_decrease() {
        assert_eq!(step_size(1, 0.7), 1.0);
        assert!((1..100).all(|k| step_size(k + 1, 0.7) < step_size(k, 0.7)));
        let c = EmConfig { full_steps: 3, ..Default::default() };
        assert_eq!((1..=4).map(|k| c.gamma(k)).collect::<Vec<_>>(), vec![1.0, 1.0, 1.0, 1.0]);
        assert!(c.gamma(5) < 1.0);
    }
}
