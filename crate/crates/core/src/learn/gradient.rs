//! Stochastic Newton and gradient ascent on the particle log-likelihood.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_loglik, score_and_hessian};
use crate::model::DifferentiableModel;
use crate::params::ParameterVector;
use crate::rng::RandomStream;

/// Eigenvalues of the unconstrained Hessian are clipped to at most this.
pub const EIGEN_CLIP: f64 = -1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Newton,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub max_iters: usize,
    pub direction: Direction,
    /// First trial step of each line search, before shrinking.
    pub initial_step: f64,
    /// Bound on `‖α d‖` in unconstrained coordinates.
    pub max_step_norm: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    pub c1: f64,
    /// Slack `κ` in multiples of the running standard deviation of `ln Ẑ`.
    pub slack_sds: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            direction: Direction::Newton,
            initial_step: 1.0,
            max_step_norm: 1.0,
            shrink: 0.5,
            max_backtracks: 8,
            c1: 1e-4,
            slack_sds: 2.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_step > 0.0
            && self.max_step_norm > 0.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.c1 >= 0.0
            && self.slack_sds >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!("invalid search config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub log_z: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct SearchState {
    pub theta: ParameterVector,
    /// Initial trial step for the next line search; always positive.
    pub step: f64,
    /// Last direction in free unconstrained coordinates.
    pub direction: Vec<f64>,
    /// Last projected Hessian, when the Newton direction was used.
    pub scaling: Option<DMatrix<f64>>,
    pub iteration: usize,
    pub trace: Vec<SearchRecord>,
}

/// Score and Hessian in the free unconstrained coordinates `u`, by the chain rule
/// through each bound transform.
fn to_unconstrained(theta: &ParameterVector, g: &DVector<f64>, h: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let free = theta.free_indices();
    let u = theta.free_unconstrained();
    let d: Vec<(f64, f64)> = free.iter().zip(&u).map(|(&i, &ui)| theta.bounds()[i].derivatives(ui)).collect();
    let p = free.len();
    let gu = DVector::from_fn(p, |a, _| g[free[a]] * d[a].0);
    let mut hu = DMatrix::from_fn(p, p, |a, b| d[a].0 * h[(free[a], free[b])] * d[b].0);
    for a in 0..p {
        hu[(a, a)] += g[free[a]] * d[a].1;
    }
    (gu, hu)
}

/// Newton direction from `h` clipped to negative definite, or `None` when
/// clipping touches more than half of the spectrum.
fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.iter().filter(|&&l| !(l <= EIGEN_CLIP)).count();
    if 2 * clipped > g.len() {
        return None;
    }
    let lam = eig.eigenvalues.map(|l| if l <= EIGEN_CLIP { l } else { EIGEN_CLIP });
    let v = &eig.eigenvectors;
    let coef = (v.transpose() * g).component_div(&lam);
    let d = -(v * coef);
    let proj = v * DMatrix::from_diagonal(&lam) * v.transpose();
    Some((d, proj))
}

fn loglik_or_neg_inf<M: DifferentiableModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<f64> {
    match estimate_loglik(model, data, theta, n, &mut RandomStream::new(seed, 0)) {
        Ok(v) => Ok(v),
        Err(e) if e.is_degeneracy() => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Line-searched ascent on `ln p̂(y | θ)` over the free parameters.
pub fn gradient_search<M: DifferentiableModel>(
    model: &M,
    data: &Dataset,
    theta0: &ParameterVector,
    n: usize,
    config: &SearchConfig,
    rng: &mut RandomStream,
) -> Result<SearchState> {
    config.validate()?;
    if theta0.len() != model.param_names().len() {
        return Err(Error::input(format!(
            "model has {} parameters, got {}",
            model.param_names().len(),
            theta0.len()
        )));
    }
    let mut state = SearchState {
        theta: theta0.clone(),
        step: config.initial_step,
        direction: Vec::new(),
        scaling: None,
        iteration: 0,
        trace: Vec::with_capacity(config.max_iters),
    };
    // squared differences of paired independent ln Ẑ at one θ, each 2σ²
    let mut pair_sq = 0.0;
    let mut pairs = 0usize;
    for k in 1..=config.max_iters {
        state.iteration = k;
        let score_seed = rng.next_u64();
        let crn_seed = rng.next_u64();
        let theta = state.theta.clone();
        if theta.free_indices().is_empty() {
            let l = loglik_or_neg_inf(model, data, theta.values(), n, crn_seed)?;
            state.trace.push(SearchRecord {
                iter: k,
                theta: theta.values().to_vec(),
                log_z: l,
                step: state.step,
                accepted: false,
            });
            continue;
        }
        let est = score_and_hessian(model, data, theta.values(), n, &mut RandomStream::new(score_seed, 0))?;
        let (g, h) = to_unconstrained(&theta, &est.grad, &est.hess);
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                iteration: k,
                iterate: theta.values().to_vec(),
                message: "gradient".into(),
            });
        }
        let (d, scaling) = match config.direction {
            Direction::Gradient => (g.clone(), None),
            Direction::Newton => match h.iter().all(|x| x.is_finite()).then(|| newton_direction(&g, &h)).flatten() {
                Some((d, proj)) => (d, Some(proj)),
                None => (g.clone(), None),
            },
        };
        state.direction = d.iter().copied().collect();
        state.scaling = scaling;

        let l0 = loglik_or_neg_inf(model, data, theta.values(), n, crn_seed)?;
        if l0.is_finite() && est.log_lik.is_finite() {
            pair_sq += (l0 - est.log_lik).powi(2);
            pairs += 1;
        }
        let sd = if pairs > 0 { (pair_sq / (2.0 * pairs as f64)).sqrt() } else { 0.0 };
        let kappa = config.slack_sds * sd;
        let slope = g.dot(&d);
        let dnorm = d.norm();
        let mut alpha = if dnorm > 0.0 {
            state.step.min(config.max_step_norm / dnorm)
        } else {
            state.step
        };
        let u = DVector::from_vec(theta.free_unconstrained());
        let mut accepted = None;
        if dnorm > 0.0 && l0.is_finite() {
            for _ in 0..=config.max_backtracks {
                let cand = theta.with_free_unconstrained((&u + &d * alpha).as_slice());
                if cand.values().iter().all(|v| v.is_finite()) {
                    let l = loglik_or_neg_inf(model, data, cand.values(), n, crn_seed)?;
                    if l.is_finite() && l >= l0 + config.c1 * alpha * slope - kappa {
                        accepted = Some((cand, l));
                        break;
                    }
                }
                alpha *= config.shrink;
            }
        }
        match accepted {
            Some((cand, l)) => {
                state.theta = cand;
                state.step = (state.step / config.shrink).min(config.initial_step);
                state.trace.push(SearchRecord {
                    iter: k,
                    theta: state.theta.values().to_vec(),
                    log_z: l,
                    step: alpha,
                    accepted: true,
                });
            }
            None => {
                state.step *= config.shrink;
                state.trace.push(SearchRecord {
                    iter: k,
                    theta: theta.values().to_vec(),
                    log_z: l0,
                    step: alpha,
                    accepted: false,
                });
            }
        }
        log::debug!("gradient search iteration {k}: logZ {:.4}", state.trace.last().map_or(f64::NAN, |r| r.log_z));
    }
    Ok(state)
}
