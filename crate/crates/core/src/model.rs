//! The state-space model contract.
//!
//! Time indices are 0-based: `x_0` is drawn from the initial law and
//! `x_t`, `t ≥ 1`, from the transition given `x_{t-1}` and `u_t`. Parameters
//! are passed as a slice ordered like [`StateSpaceModel::param_names`].

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub trait StateSpaceModel: Send + Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn state_dim(&self) -> usize;

    fn param_names(&self) -> Vec<String>;

    fn sample_initial(&self, theta: &[f64], rng: &mut RandomStream) -> Self::State;

    /// `None` marks a sample-only initial law.
    fn initial_logpdf(&self, _x: &Self::State, _theta: &[f64]) -> Option<f64> {
        None
    }

    fn sample_transition(
        &self,
        x_prev: &Self::State,
        u: &[f64],
        t: usize,
        theta: &[f64],
        rng: &mut RandomStream,
    ) -> Self::State;

    /// `None` marks a sample-only transition.
    fn transition_logpdf(
        &self,
        _x: &Self::State,
        _x_prev: &Self::State,
        _u: &[f64],
        _t: usize,
        _theta: &[f64],
    ) -> Option<f64> {
        None
    }

    fn has_transition_density(&self) -> bool {
        false
    }

    fn observation_logpdf(&self, y: &[f64], x: &Self::State, u: &[f64], t: usize, theta: &[f64])
        -> f64;

    fn sample_observation(
        &self,
        x: &Self::State,
        u: &[f64],
        t: usize,
        theta: &[f64],
        rng: &mut RandomStream,
    ) -> Vec<f64>;
}

/// Gradient and Hessian of a log-density with respect to θ.
#[derive(Clone, Debug, PartialEq)]
pub struct GradHess {
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl GradHess {
    pub fn zeros(p: usize) -> Self {
        Self {
            grad: DVector::zeros(p),
            hess: DMatrix::zeros(p, p),
        }
    }

    pub fn add_assign(&mut self, other: &GradHess) {
        self.grad += &other.grad;
        self.hess += &other.hess;
    }
}

/// θ-derivatives of the log-densities, hand-supplied per model.
pub trait DifferentiableModel: StateSpaceModel {
    fn initial_grad(&self, x: &Self::State, theta: &[f64]) -> GradHess {
        let _ = x;
        GradHess::zeros(theta.len())
    }

    fn transition_grad(
        &self,
        x: &Self::State,
        x_prev: &Self::State,
        u: &[f64],
        t: usize,
        theta: &[f64],
    ) -> GradHess;

    fn observation_grad(
        &self,
        y: &[f64],
        x: &Self::State,
        u: &[f64],
        t: usize,
        theta: &[f64],
    ) -> GradHess;
}

/// Real-vector states, convertible to and from nalgebra vectors.
pub trait RealState: StateSpaceModel {
    fn to_vector(&self, x: &Self::State) -> DVector<f64>;
    fn from_vector(&self, v: &DVector<f64>) -> Self::State;
}

/// Gaussian-additive structure with differentiable mean maps:
/// `x_t = f(x_{t-1}, u_t) + v`, `v ~ N(0, Q)`, `y_t = h(x_t, u_t) + e`, `e ~ N(0, R)`.
pub trait LinearizableModel: RealState {
    /// `(μ₁, Σ₁)`; a zero covariance marks a point mass.
    fn initial_moments(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>);
    fn transition_mean(&self, x: &DVector<f64>, u: &[f64], t: usize, theta: &[f64]) -> DVector<f64>;
    fn transition_jacobian(&self, x: &DVector<f64>, u: &[f64], t: usize, theta: &[f64]) -> DMatrix<f64>;
    fn transition_cov(&self, t: usize, theta: &[f64]) -> DMatrix<f64>;
    fn observation_mean(&self, x: &DVector<f64>, u: &[f64], t: usize, theta: &[f64]) -> DVector<f64>;
    fn observation_jacobian(&self, x: &DVector<f64>, u: &[f64], t: usize, theta: &[f64]) -> DMatrix<f64>;
    fn observation_cov(&self, t: usize, theta: &[f64]) -> DMatrix<f64>;
}

/// Noise-free rollout used for simulation error metrics.
pub trait DeterministicModel: StateSpaceModel {
    fn mean_transition(&self, x: &Self::State, u: &[f64], t: usize, theta: &[f64]) -> Self::State;
    fn mean_observation(&self, x: &Self::State, u: &[f64], t: usize, theta: &[f64]) -> Vec<f64>;
}

/// `ln p(x_{0:T-1}, observed y | θ)`. Unobserved steps contribute no
/// observation factor.
pub fn log_joint<M: StateSpaceModel>(
    model: &M,
    traj: &[M::State],
    data: &Dataset,
    theta: &[f64],
) -> Result<f64> {
    if traj.len() != data.len() {
        return Err(Error::input(format!(
            "trajectory length {} but {} data steps",
            traj.len(),
            data.len()
        )));
    }
    let mut acc = model
        .initial_logpdf(&traj[0], theta)
        .ok_or_else(|| Error::capability("initial density unavailable"))?;
    for t in 0..traj.len() {
        if t > 0 {
            acc += model
                .transition_logpdf(&traj[t], &traj[t - 1], data.input(t), t, theta)
                .ok_or_else(|| Error::capability("transition density unavailable"))?;
        }
        if let Some(y) = data.observation(t) {
            acc += model.observation_logpdf(y, &traj[t], data.input(t), t, theta);
        }
        if acc == f64::NEG_INFINITY {
            return Ok(acc);
        }
    }
    Ok(acc)
}

/// Simulate states and observations for `inputs`, observing at every step.
pub fn simulate<M: StateSpaceModel>(
    model: &M,
    inputs: &[Vec<f64>],
    theta: &[f64],
    rng: &mut RandomStream,
) -> Result<(Vec<M::State>, Dataset)> {
    if inputs.is_empty() {
        return Err(Error::input("no inputs"));
    }
    let mut xs: Vec<M::State> = Vec::with_capacity(inputs.len());
    let mut ys = Vec::with_capacity(inputs.len());
    for (t, u) in inputs.iter().enumerate() {
        let x = if t == 0 {
            model.sample_initial(theta, rng)
        } else {
            model.sample_transition(&xs[t - 1], u, t, theta, rng)
        };
        ys.push(Some(model.sample_observation(&x, u, t, theta, rng)));
        xs.push(x);
    }
    let data = Dataset::new(inputs.to_vec(), ys)?;
    Ok((xs, data))
}
