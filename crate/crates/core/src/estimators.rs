//! Estimators built on the particle filter: log-likelihood, score and
//! Hessian, deterministic simulation error and chain autocorrelation.

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{ekf_twisting, TwistedProposal};
use crate::model::{DeterministicModel, DifferentiableModel, GradHess, LinearizableModel, StateSpaceModel};
use crate::rng::RandomStream;
use crate::smc::{smc_run, smc_run_observed, Bootstrap, SmcConfig, SmcObserver, SmcOutput};

/// `ln Ẑ` from a bootstrap filter with resampling at every reweighted step.
pub fn estimate_loglik<M: StateSpaceModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    rng: &mut RandomStream,
) -> Result<f64> {
    Ok(smc_run(model, data, theta, &Bootstrap, None, &SmcConfig::new(n), rng)?.log_z())
}

/// Whether EKF twisting corrects only the weights or also supplies the proposal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TwistMode {
    #[default]
    WeightsOnly,
    WithProposal,
}

/// `ln Ẑ` from an EKF-twisted filter.
pub fn estimate_loglik_twisted<M: LinearizableModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    mode: TwistMode,
    rng: &mut RandomStream,
) -> Result<f64> {
    Ok(twisted_run(model, data, theta, mode, &SmcConfig::new(n), rng)?.log_z())
}

/// Full output of an EKF-twisted filter.
pub fn twisted_run<M: LinearizableModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    mode: TwistMode,
    config: &SmcConfig,
    rng: &mut RandomStream,
) -> Result<SmcOutput<M::State>> {
    let tables = ekf_twisting(model, data, theta)?;
    match mode {
        TwistMode::WeightsOnly => smc_run(model, data, theta, &Bootstrap, Some(&tables), config, rng),
        TwistMode::WithProposal => {
            let prop = TwistedProposal::new(model, &tables, theta)?;
            smc_run(model, data, theta, &prop, Some(&tables), config, rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEstimate {
    pub log_lik: f64,
    pub grad: DVector<f64>,
    /// Symmetric.
    pub hess: DMatrix<f64>,
}

/// Per-particle accumulators `α_t^i`, `β_t^i` and running totals of `v_t`, `B_t`.
struct GradHessAccumulators<'a, M> {
    model: &'a M,
    data: &'a Dataset,
    theta: &'a [f64],
    alpha: Vec<DVector<f64>>,
    beta: Vec<DMatrix<f64>>,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl<M: DifferentiableModel> SmcObserver<M> for GradHessAccumulators<'_, M> {
    fn on_step(&mut self, t: usize, prev: &[M::State], anc: &[usize], xs: &[M::State], w: &[f64]) -> Result<()> {
        let p = self.theta.len();
        let u = self.data.input(t);
        let y = self.data.observation(t);
        let mut gammas = Vec::with_capacity(xs.len());
        let mut phis = Vec::with_capacity(xs.len());
        let mut v = DVector::zeros(p);
        let mut b = DMatrix::zeros(p, p);
        for (j, x) in xs.iter().enumerate() {
            let mut gh = if t == 0 {
                self.model.initial_grad(x, self.theta)
            } else {
                let a = anc[j];
                let mut g = self.model.transition_grad(x, &prev[a], u, t, self.theta);
                g.grad += &self.alpha[a];
                g.hess += &self.beta[a];
                g
            };
            if let Some(y) = y {
                gh.add_assign(&self.model.observation_grad(y, x, u, t, self.theta));
            }
            let GradHess { grad: g, hess: mut h } = gh;
            h = (&h + h.transpose()) * 0.5;
            if w[j] > 0.0 {
                v.axpy(w[j], &g, 1.0);
                b += (&h + &g * g.transpose()) * w[j];
            }
            gammas.push(g);
            phis.push(h);
        }
        // B_t = Σ w (φ + γγᵀ) − v vᵀ, the covariance form of the missing-information identity
        b -= &v * v.transpose();
        b = (&b + b.transpose()) * 0.5;
        if !v.iter().all(|x| x.is_finite()) || !b.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                message: "non-finite score contribution".into(),
            });
        }
        self.alpha = gammas.into_iter().map(|g| g - &v).collect();
        self.beta = phis.into_iter().map(|h| h - &b).collect();
        self.grad += v;
        self.hess += b;
        Ok(())
    }
}

/// Score and observed-information estimates from one bootstrap pass; the
/// log-likelihood estimate comes from the same particle system.
pub fn score_and_hessian<M: DifferentiableModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    rng: &mut RandomStream,
) -> Result<ScoreEstimate> {
    let p = theta.len();
    let mut acc = GradHessAccumulators {
        model,
        data,
        theta,
        alpha: Vec::new(),
        beta: Vec::new(),
        grad: DVector::zeros(p),
        hess: DMatrix::zeros(p, p),
    };
    let out = smc_run_observed(model, data, theta, &Bootstrap, None, &SmcConfig::new(n), rng, Some(&mut acc))?;
    Ok(ScoreEstimate {
        log_lik: out.log_z(),
        grad: acc.grad,
        hess: acc.hess,
    })
}

/// Noise-free rollout from `x0` through the model's mean maps.
pub fn simulate_output<M: DeterministicModel>(
    model: &M,
    inputs: &[Vec<f64>],
    theta: &[f64],
    x0: &M::State,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut x = x0.clone();
    for (t, u) in inputs.iter().enumerate() {
        if t > 0 {
            x = model.mean_transition(&x, u, t, theta);
        }
        out.push(model.mean_observation(&x, u, t, theta));
    }
    out
}

/// `√(1/T Σ ‖y_t − ŷ_t‖²)`.
pub fn e_rms<F: Float>(y: &[Vec<F>], yhat: &[Vec<F>]) -> Result<F> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::input(format!("lengths {} and {} differ or are zero", y.len(), yhat.len())));
    }
    let mut s = F::zero();
    for (a, b) in y.iter().zip(yhat) {
        if a.len() != b.len() {
            return Err(Error::input("observation dimensions differ"));
        }
        for (&p, &q) in a.iter().zip(b) {
            s = s + (p - q) * (p - q);
        }
    }
    Ok((s / F::from(y.len()).expect("length representable")).sqrt())
}

/// e_RMS of the deterministic rollout from `x0` against the observations of a
/// fully observed `data`.
pub fn simulation_error<M: DeterministicModel>(model: &M, data: &Dataset, theta: &[f64], x0: &M::State) -> Result<f64> {
    if data.n_observed() != data.len() {
        return Err(Error::input("simulation error needs every step observed"));
    }
    let yhat = simulate_output(model, data.inputs(), theta, x0);
    let y: Vec<Vec<f64>> = data.observations().iter().map(|o| o.clone().expect("checked")).collect();
    e_rms(&y, &yhat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcfSeries<F> {
    /// `rho[k]` at lag `k`, `rho[0] = 1`.
    pub rho: Vec<F>,
    /// `1 + 2 Σ ρ_k` up to the first negative lag.
    pub iact: F,
}

/// Sample autocorrelation with the biased `1/n` normalization.
pub fn acf<F: Float>(series: &[F], max_lag: usize) -> Result<AcfSeries<F>> {
    let n = series.len();
    if n <= max_lag {
        return Err(Error::input(format!("series length {n} must exceed max lag {max_lag}")));
    }
    let nf = F::from(n).expect("length representable");
    let mean = series.iter().fold(F::zero(), |a, &x| a + x) / nf;
    let c0 = series.iter().fold(F::zero(), |a, &x| a + (x - mean) * (x - mean)) / nf;
    if !(c0 > F::zero()) {
        return Err(Error::Domain("constant series has no autocorrelation".into()));
    }
    let mut rho = Vec::with_capacity(max_lag + 1);
    for k in 0..=max_lag {
        let ck = (0..n - k).fold(F::zero(), |a, i| a + (series[i] - mean) * (series[i + k] - mean)) / nf;
        rho.push(ck / c0);
    }
    let two = F::one() + F::one();
    let mut iact = F::one();
    for &r in &rho[1..] {
        if r < F::zero() {
            break;
        }
        iact = iact + two * r;
    }
    Ok(AcfSeries { rho, iact })
}

/// IACT with the lag window capped at `min(n/2, 2000)`.
pub fn iact(series: &[f64]) -> Result<f64> {
    let max_lag = (series.len() / 2).min(2000);
    Ok(acf(series, max_lag)?.iact)
}

/// Effective sample size `n / IACT`.
pub fn chain_ess(series: &[f64]) -> Result<f64> {
    Ok(series.len() as f64 / iact(series)?)
}
