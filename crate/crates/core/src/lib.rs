//! Sequential Monte Carlo for nonlinear state-space models: filtering,
//! likelihood estimation, twisted proposals, and maximum-likelihood and
//! Bayesian parameter learning.
//!
//! The Gaussian reference layer is generic over the scalar type
//! ([`Scalar`], implemented for `f32` and `f64`); the aliases below fix it.
//! Particle methods run in `f64`.

pub mod data;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod io;
pub mod learn;
pub mod model;
pub mod models;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod smc;
pub mod stats;

pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{
    log_joint, simulate, DeterministicModel, DifferentiableModel, GradHess, LinearizableModel, RealState,
    StateSpaceModel,
};
pub use params::{Interval, ParameterVector};
pub use rng::RandomStream;
pub use scalar::Scalar;

pub type LgssSpecF64 = gaussian::LgssSpec<f64>;
pub type LgssSpecF32 = gaussian::LgssSpec<f32>;
pub type GaussianBeliefF64 = gaussian::GaussianBelief<f64>;
pub type GaussianBeliefF32 = gaussian::GaussianBelief<f32>;
pub type KalmanOutputF64 = gaussian::KalmanOutput<f64>;
pub type KalmanOutputF32 = gaussian::KalmanOutput<f32>;
pub type SmootherOutputF64 = gaussian::SmootherOutput<f64>;
pub type SmootherOutputF32 = gaussian::SmootherOutput<f32>;
