//! Closed-form parameter conditionals given a sampled trajectory.

use nalgebra::{DMatrix, DVector, SVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::data::Dataset;
use crate::dist::{Prior, PriorDist};
use crate::error::{Error, Result};
use crate::gaussian::LgssSpec;
use crate::learn::mcmc::{mh_accept, ParamConditional};
use crate::models::dengue::{dengue_counts, Dengue, SeirState, DENGUE_PARAM_NAMES};
use crate::models::watertank::{TankState, TankStats, WaterTank, TANK_PARAM_NAMES};
use crate::models::{Lgss, LgssParam};
use crate::params::ParameterVector;
use crate::rng::RandomStream;

/// Draw from `Beta(α + s, β + n − s)`.
pub fn conjugate_beta_binomial_update<R: Rng + ?Sized>(alpha: f64, beta: f64, s: f64, n: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Domain(format!("beta prior ({alpha}, {beta}) must be positive")));
    }
    if !(s >= 0.0 && s <= n && n.is_finite()) {
        return Err(Error::input(format!("need 0 ≤ s ≤ n, got s = {s}, n = {n}")));
    }
    let d = Beta::new(alpha + s, beta + n - s).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Draw from `InvGamma(a + n/2, b + ss/2)` given `n` residuals with sum of squares `ss`.
pub fn invgamma_from_ss<R: Rng + ?Sized>(a: f64, b: f64, n: f64, ss: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!("inverse-gamma prior ({a}, {b}) must be positive")));
    }
    if !(n >= 0.0 && ss >= 0.0) {
        return Err(Error::input(format!("invalid residual summary n = {n}, ss = {ss}")));
    }
    let g = Gamma::new(a + 0.5 * n, 1.0 / (b + 0.5 * ss)).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// Draw from `InvGamma(a + n/2, b + ½ Σ r²)`.
pub fn conjugate_invgamma_variance_update<R: Rng + ?Sized>(a: f64, b: f64, residuals: &[f64], rng: &mut R) -> Result<f64> {
    let ss = residuals.iter().map(|r| r * r).sum();
    invgamma_from_ss(a, b, residuals.len() as f64, ss, rng)
}

fn free_index(theta: &ParameterVector, name: &str) -> Option<usize> {
    theta.index(name).filter(|&i| !theta.is_fixed(i))
}

fn invgamma_prior(prior: &Prior, name: &str) -> Result<(f64, f64)> {
    match prior.get(name) {
        Some(&PriorDist::InverseGamma { shape, scale }) => Ok((shape, scale)),
        other => Err(Error::capability(format!(
            "no conjugate update for {name} under prior {other:?}; an inverse-gamma prior is required"
        ))),
    }
}

/// Scalar LGSS with free `q` and/or `r` under inverse-gamma priors.
#[derive(Clone, Debug)]
pub struct LgssVarianceConditional {
    prior: Prior,
}

impl LgssVarianceConditional {
    pub fn new(model: &Lgss, prior: &Prior, theta: &ParameterVector) -> Result<Self> {
        let spec = model.spec_at(theta.values());
        if spec.state_dim() != 1 || spec.obs_dim() != 1 {
            return Err(Error::capability("conjugate LGSS updates need a scalar model"));
        }
        for i in theta.free_indices() {
            let name = &theta.names()[i];
            if name != LgssParam::Q.name() && name != LgssParam::R.name() {
                return Err(Error::capability(format!("no conjugate update for LGSS parameter {name}")));
            }
            invgamma_prior(prior, name)?;
        }
        Ok(Self { prior: prior.clone() })
    }

    fn residuals(spec: &LgssSpec<f64>, traj: &[Vec<f64>], data: &Dataset) -> (Vec<f64>, Vec<f64>) {
        let (a, b, c, d) = (spec.a[(0, 0)], &spec.b, spec.c[(0, 0)], &spec.d);
        let mut tr = Vec::with_capacity(traj.len());
        let mut ob = Vec::with_capacity(traj.len());
        for t in 0..traj.len() {
            let u = DVector::from_column_slice(data.input(t));
            if t > 0 {
                tr.push(traj[t][0] - a * traj[t - 1][0] - (b * &u).get(0).copied().unwrap_or(0.0));
            }
            if let Some(y) = data.observation(t) {
                ob.push(y[0] - c * traj[t][0] - (d * &u).get(0).copied().unwrap_or(0.0));
            }
        }
        (tr, ob)
    }
}

impl ParamConditional<Lgss> for LgssVarianceConditional {
    fn sample(
        &self,
        model: &Lgss,
        traj: &[Vec<f64>],
        data: &Dataset,
        theta: &ParameterVector,
        rng: &mut RandomStream,
    ) -> Result<ParameterVector> {
        let spec = model.spec_at(theta.values());
        let (tr, ob) = Self::residuals(&spec, traj, data);
        let mut out = theta.clone();
        if let Some(i) = free_index(theta, LgssParam::Q.name()) {
            let (a, b) = invgamma_prior(&self.prior, "q")?;
            out.set_at(i, conjugate_invgamma_variance_update(a, b, &tr, rng)?)?;
        }
        if let Some(i) = free_index(theta, LgssParam::R.name()) {
            let (a, b) = invgamma_prior(&self.prior, "r")?;
            out.set_at(i, conjugate_invgamma_variance_update(a, b, &ob, rng)?)?;
        }
        Ok(out)
    }
}

/// Beta-binomial blocks for every free dengue rate; uniform priors on
/// `[0, 1]` count as `Beta(1, 1)`.
#[derive(Clone, Debug)]
pub struct DengueConditional {
    blocks: Vec<(usize, f64, f64)>,
}

impl DengueConditional {
    pub fn new(prior: &Prior, theta: &ParameterVector) -> Result<Self> {
        let mut blocks = Vec::new();
        for i in theta.free_indices() {
            let name = &theta.names()[i];
            let k = DENGUE_PARAM_NAMES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::input(format!("unknown dengue parameter {name}")))?;
            let (a, b) = match prior.get(name) {
                Some(&PriorDist::Beta { alpha, beta }) => (alpha, beta),
                Some(&PriorDist::Uniform { lo, hi }) if lo == 0.0 && hi == 1.0 => (1.0, 1.0),
                other => {
                    return Err(Error::capability(format!(
                        "no conjugate update for {name} under prior {other:?}"
                    )))
                }
            };
            blocks.push((k, a, b));
        }
        Ok(Self { blocks })
    }
}

impl ParamConditional<Dengue> for DengueConditional {
    fn sample(
        &self,
        _model: &Dengue,
        traj: &[SeirState],
        data: &Dataset,
        theta: &ParameterVector,
        rng: &mut RandomStream,
    ) -> Result<ParameterVector> {
        let counts = dengue_counts(traj, data);
        let mut out = theta.clone();
        for &(k, a, b) in &self.blocks {
            let (s, n) = counts[k];
            out.set_at(k, conjugate_beta_binomial_update(a, b, s, n, rng)?)?;
        }
        Ok(out)
    }
}

/// How the tank flow coefficients are updated given a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TankKUpdate {
    /// Exact Gaussian conditional; every free k needs a Gaussian prior.
    Gaussian,
    /// Random-walk Metropolis steps with the given standard deviation.
    RandomWalk { scale: f64, steps: usize },
}

/// Water-tank conditional: k's by [`TankKUpdate`], both variances by
/// inverse-gamma updates.
#[derive(Clone, Debug)]
pub struct TankConditional {
    prior: Prior,
    k_update: TankKUpdate,
}

impl TankConditional {
    pub fn new(prior: &Prior, theta: &ParameterVector, k_update: TankKUpdate) -> Result<Self> {
        for i in theta.free_indices() {
            let name = TANK_PARAM_NAMES[i];
            if i >= 6 {
                invgamma_prior(prior, name)?;
            } else if k_update == TankKUpdate::Gaussian && !matches!(prior.get(name), Some(PriorDist::Gaussian { .. })) {
                return Err(Error::capability(format!("exact k update needs a Gaussian prior on {name}")));
            } else if prior.get(name).is_none() {
                return Err(Error::input(format!("no prior for {name}")));
            }
        }
        if let TankKUpdate::RandomWalk { scale, .. } = k_update {
            if !(scale > 0.0) {
                return Err(Error::input("random-walk scale must be positive"));
            }
        }
        Ok(Self {
            prior: prior.clone(),
            k_update,
        })
    }

    fn k_logprior(&self, k: &SVector<f64, 6>, free: &[usize]) -> f64 {
        free.iter()
            .map(|&i| self.prior.get(TANK_PARAM_NAMES[i]).map_or(0.0, |d| d.logpdf(k[i])))
            .sum()
    }
}

impl ParamConditional<WaterTank> for TankConditional {
    fn sample(
        &self,
        _model: &WaterTank,
        traj: &[TankState],
        data: &Dataset,
        theta: &ParameterVector,
        rng: &mut RandomStream,
    ) -> Result<ParameterVector> {
        let st = TankStats::from_trajectory(traj, data);
        let vals = theta.values();
        let sv2 = vals[6];
        let mut k = SVector::<f64, 6>::from_column_slice(&vals[..6]);
        let free: Vec<usize> = (0..6).filter(|&i| !theta.is_fixed(i)).collect();
        if !free.is_empty() {
            match self.k_update {
                TankKUpdate::Gaussian => {
                    let nf = free.len();
                    let fixed: Vec<usize> = (0..6).filter(|&i| theta.is_fixed(i)).collect();
                    let mut prec = DMatrix::from_fn(nf, nf, |a, b| st.ptp[(free[a], free[b])] / sv2);
                    let mut rhs = DVector::from_fn(nf, |a, _| {
                        (st.ptd[free[a]] - fixed.iter().map(|&j| st.ptp[(free[a], j)] * k[j]).sum::<f64>()) / sv2
                    });
                    for (a, &i) in free.iter().enumerate() {
                        if let Some(&PriorDist::Gaussian { mean, var }) = self.prior.get(TANK_PARAM_NAMES[i]) {
                            prec[(a, a)] += 1.0 / var;
                            rhs[a] += mean / var;
                        }
                    }
                    let chol = prec.cholesky().ok_or_else(|| Error::Numerical {
                        step: 0,
                        message: "k posterior precision not positive definite".into(),
                    })?;
                    let mean = chol.solve(&rhs);
                    // x = μ + L⁻ᵀ z has covariance (L Lᵀ)⁻¹
                    let z = DVector::from_fn(nf, |_, _| StandardNormal.sample(rng));
                    let dev = chol.l().transpose().solve_upper_triangular(&z).expect("triangular factor invertible");
                    for (a, &i) in free.iter().enumerate() {
                        k[i] = mean[a] + dev[a];
                    }
                }
                TankKUpdate::RandomWalk { scale, steps } => {
                    let target = |k: &SVector<f64, 6>| -st.residual_ss(k) / (2.0 * sv2) + self.k_logprior(k, &free);
                    let mut cur = target(&k);
                    for _ in 0..steps {
                        let mut prop = k;
                        for &i in &free {
                            let z: f64 = StandardNormal.sample(rng);
                            prop[i] += scale * z;
                        }
                        let new = target(&prop);
                        if mh_accept(new, cur, 0.0, 0.0, rng) {
                            k = prop;
                            cur = new;
                        }
                    }
                }
            }
        }
        let mut out = theta.clone();
        for &i in &free {
            out.set_at(i, k[i])?;
        }
        if !theta.is_fixed(6) {
            let (a, b) = invgamma_prior(&self.prior, TANK_PARAM_NAMES[6])?;
            // two state components per transition share σ_v²
            out.set_at(6, invgamma_from_ss(a, b, 2.0 * st.n_trans, st.residual_ss(&k), rng)?)?;
        }
        if !theta.is_fixed(7) {
            let (a, b) = invgamma_prior(&self.prior, TANK_PARAM_NAMES[7])?;
            out.set_at(7, invgamma_from_ss(a, b, st.n_obs, st.obs_ss, rng)?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::PriorDist;
    use crate::models::watertank::{TankInitial, THETA_HAT};

    /// Normalized CDF on a uniform grid from unnormalized log-density values.
    fn grid_cdf(lo: f64, hi: f64, n: usize, logf: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
        let h = (hi - lo) / n as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        let lf: Vec<f64> = xs.iter().map(|&x| logf(x)).collect();
        let mx = lf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = lf.iter().map(|l| { acc += (l - mx).exp(); acc }).collect();
        let tot = acc;
        cdf.iter_mut().for_each(|c| *c /= tot);
        (xs.iter().map(|x| x + 0.5 * h).collect(), cdf)
    }

    fn ks_against_grid(samples: &mut [f64], edges: &[f64], cdf: &[f64]) -> f64 {
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let j = edges.partition_point(|e| e < s).min(cdf.len() - 1);
            let f = if j == 0 { 0.0 } else { cdf[j - 1] };
            d = d.max((f - i as f64 / n).abs()).max((f - (i + 1) as f64 / n).abs());
        }
        d
    }

    #[test]
    fn beta_binomial_matches_grid_posterior() {
        // Beta(1,1) prior × Binomial(3 | 10, p)
        let (edges, cdf) = grid_cdf(0.0, 1.0, 20_000, |p| 3.0 * p.ln() + 7.0 * (1.0 - p).ln());
        let mut rng = RandomStream::new(1, 0);
        let mut xs: Vec<f64> = (0..20_000)
            .map(|_| conjugate_beta_binomial_update(1.0, 1.0, 3.0, 10.0, &mut rng).unwrap())
            .collect();
        // 1% critical value of the one-sample KS statistic
        assert!(ks_against_grid(&mut xs, &edges, &cdf) < 1.63 / (20_000f64).sqrt());
    }

    #[test]
    fn beta_binomial_no_data_is_prior_and_rejects_bad_counts() {
        let mut rng = RandomStream::new(2, 0);
        let m: f64 = (0..50_000).map(|_| conjugate_beta_binomial_update(2.0, 6.0, 0.0, 0.0, &mut rng).unwrap()).sum::<f64>() / 50_000.0;
        assert!((m - 0.25).abs() < 0.005);
        assert!(conjugate_beta_binomial_update(1.0, 1.0, 4.0, 3.0, &mut rng).is_err());
        assert!(conjugate_beta_binomial_update(1.0, 1.0, -1.0, 3.0, &mut rng).is_err());
    }

    #[test]
    fn invgamma_matches_grid_posterior() {
        // IG(3, 2) prior × N(1 | 0, v) N(1 | 0, v) ∝ IG(4, 3)
        let (edges, cdf) = grid_cdf(0.0, 20.0, 200_000, |v| -5.0 * v.ln() - 2.0 / v - 1.0 / v);
        let mut rng = RandomStream::new(3, 0);
        let mut xs: Vec<f64> = (0..20_000)
            .map(|_| conjugate_invgamma_variance_update(3.0, 2.0, &[1.0, 1.0], &mut rng).unwrap())
            .collect();
        assert!(ks_against_grid(&mut xs, &edges, &cdf) < 1.63 / (20_000f64).sqrt());
    }

    #[test]
    fn invgamma_concentrates() {
        let mut rng = RandomStream::new(4, 0);
        let r: Vec<f64> = (0..1_000_000).map(|_| 1.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let v = conjugate_invgamma_variance_update(1.0, 1.0, &r, &mut rng).unwrap();
        assert!((v - 2.25).abs() < 0.01 * 2.25);
        // no residuals: prior IG(3, 2) with mean 1
        let m: f64 = (0..100_000).map(|_| conjugate_invgamma_variance_update(3.0, 2.0, &[], &mut rng).unwrap()).sum::<f64>() / 1e5;
        assert!((m - 1.0).abs() < 0.02);
    }

    #[test]
    fn dengue_point_mass_stays_zero() {
        let prior = crate::models::dengue_prior();
        let names: Vec<String> = DENGUE_PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        let th = prior.sample(&names, &mut RandomStream::new(5, 0)).unwrap();
        assert_eq!(th.get("gamma_m"), Some(0.0));
        assert!(th.is_fixed(5));
        let c = DengueConditional::new(&prior, &th).unwrap();
        assert!(c.blocks.iter().all(|b| b.0 != 5));
    }

    #[test]
    fn tank_gaussian_k_conditional_matches_regression_posterior() {
        // with a flat-ish prior the conditional mean is the least-squares fit
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let inputs: Vec<Vec<f64>> = (0..400).map(|t| vec![3.0 + 2.0 * (t as f64 / 9.0).sin()]).collect();
        let (traj, d) = crate::model::simulate(&m, &inputs, &THETA_HAT, &mut RandomStream::new(6, 0)).unwrap();
        let mut prior = Prior::new();
        for n in &TANK_PARAM_NAMES[..6] {
            prior = prior.with(*n, PriorDist::Gaussian { mean: 0.0, var: 1e6 });
        }
        prior = prior
            .with("sigma_v2", PriorDist::InverseGamma { shape: 1.0, scale: 1e-4 })
            .with("sigma_e2", PriorDist::InverseGamma { shape: 1.0, scale: 1e-4 });
        let mut th = WaterTank::parameters(&THETA_HAT).unwrap();
        // no overflow in this record, so k6 is not identified
        th.set_fixed("k6", true).unwrap();
        let c = TankConditional::new(&prior, &th, TankKUpdate::Gaussian).unwrap();
        let ls = TankStats::from_trajectory(&traj, &d).maximize(&th).unwrap();
        let mut rng = RandomStream::new(7, 0);
        let reps = 2000;
        let mut mean = [0.0; 8];
        for _ in 0..reps {
            let s = c.sample(&m, &traj, &d, &th, &mut rng).unwrap();
            for (a, v) in mean.iter_mut().zip(s.values()) {
                *a += v / reps as f64;
            }
        }
        for i in 0..6 {
            assert!((mean[i] - ls.values()[i]).abs() < 2e-3, "k{}: {} vs {}", i + 1, mean[i], ls.values()[i]);
        }
        assert!((mean[6] / THETA_HAT[6] - 1.0).abs() < 0.15);
    }

    #[test]
    fn tank_random_walk_keeps_fixed_entries() {
        let m = WaterTank::new(TankInitial::Fixed([6.0, 5.0]));
        let inputs = vec![vec![3.0]; 50];
        let (traj, d) = crate::model::simulate(&m, &inputs, &THETA_HAT, &mut RandomStream::new(8, 0)).unwrap();
        let mut prior = Prior::new();
        for n in &TANK_PARAM_NAMES[..6] {
            prior = prior.with(*n, PriorDist::Uniform { lo: -1.0, hi: 1.0 });
        }
        prior = prior
            .with("sigma_v2", PriorDist::InverseGamma { shape: 1.0, scale: 1e-3 })
            .with("sigma_e2", PriorDist::InverseGamma { shape: 1.0, scale: 1e-3 });
        let mut th = WaterTank::parameters(&THETA_HAT).unwrap();
        th.set_fixed("k2", true).unwrap();
        let c = TankConditional::new(&prior, &th, TankKUpdate::RandomWalk { scale: 0.005, steps: 10 }).unwrap();
        let s = c.sample(&m, &traj, &d, &th, &mut RandomStream::new(9, 0)).unwrap();
        assert_eq!(s.values()[1], THETA_HAT[1]);
        assert!(TankConditional::new(&prior, &th, TankKUpdate::Gaussian).is_err());
    }
}
