//! Metropolis–Hastings, particle marginal MH, Gibbs scaffolding and
//! particle Gibbs with optional ancestor sampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{prior_logpdf, Prior};
use crate::error::{Error, Result};
use crate::estimators::estimate_loglik;
use crate::gaussian::kalman_loglik;
use crate::model::StateSpaceModel;
use crate::models::Lgss;
use crate::params::ParameterVector;
use crate::rng::RandomStream;
use crate::smc::{SmcOutput, csmc_run, sample_categorical, smc_run, Bootstrap, SmcConfig};

/// Accept with probability `min(1, exp(Δ))`, `Δ = (new − old) + (q_back − q_fwd)`.
pub fn mh_accept<R: Rng + ?Sized>(log_target_new: f64, log_target_old: f64, log_q_forward: f64, log_q_backward: f64, rng: &mut R) -> bool {
    if log_target_new == f64::NEG_INFINITY || log_target_new.is_nan() {
        return false;
    }
    let delta = (log_target_new - log_target_old) + (log_q_backward - log_q_forward);
    if delta >= 0.0 {
        return true;
    }
    rng.random::<f64>() < delta.exp()
}

/// Gaussian random walk on the free unconstrained coordinates.
#[derive(Clone, Debug)]
pub struct RandomWalkProposal {
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// Re-estimate the covariance from the chain during burn-in.
    pub adapt: bool,
}

impl RandomWalkProposal {
    pub fn new(cov: DMatrix<f64>, adapt: bool) -> Result<Self> {
        if !cov.is_square() || (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::input("proposal covariance must be square and symmetric"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("proposal covariance is not positive definite".into()))?
            .l();
        Ok(Self { cov, chol, adapt })
    }

    /// Independent coordinates with the given standard deviations.
    pub fn diagonal(sds: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_iterator(sds.len(), sds.iter().map(|s| s * s))), false)
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn propose<R: Rng + ?Sized>(&self, u: &[f64], rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(u.len(), |_, _| StandardNormal.sample(rng));
        let step = &self.chol * z;
        u.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iters: usize,
    /// Defaults to `iters / 10`.
    pub burn_in: Option<usize>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            burn_in: None,
        }
    }
}

impl McmcConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iters / 10)
    }
}

/// One Markov chain: samples, log-likelihood values (exact or estimated),
/// log-target values and accept flags, all of equal length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub log_z: Vec<f64>,
    pub log_target: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Optional per-iteration state trajectories, each state flattened.
    pub trajectories: Option<Vec<Vec<Vec<f64>>>>,
    pub seed: u64,
    pub burn_in: usize,
    pub config: serde_json::Value,
}

impl ChainTrace {
    fn empty(names: Vec<String>, seed: u64, burn_in: usize, config: serde_json::Value) -> Self {
        Self {
            names,
            samples: Vec::new(),
            log_z: Vec::new(),
            log_target: Vec::new(),
            accepted: Vec::new(),
            trajectories: None,
            seed,
            burn_in,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples of one parameter after burn-in.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(self.samples.iter().skip(self.burn_in).map(|s| s[i]).collect())
    }

    pub fn acceptance_rate(&self) -> f64 {
        let post = &self.accepted[self.burn_in.min(self.accepted.len())..];
        if post.is_empty() {
            return f64::NAN;
        }
        post.iter().filter(|&&a| a).count() as f64 / post.len() as f64
    }
}

fn degeneracy_as_neg_inf(r: Result<f64>) -> Result<f64> {
    match r {
        Err(e) if e.is_degeneracy() => Ok(f64::NEG_INFINITY),
        other => other,
    }
}

/// Empirical covariance of the rows of `xs`.
fn sample_cov(xs: &[Vec<f64>]) -> DMatrix<f64> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean = DVector::from_fn(d, |i, _| xs.iter().map(|x| x[i]).sum::<f64>() / n);
    let mut c = DMatrix::zeros(d, d);
    for x in xs {
        let dx = DVector::from_column_slice(x) - &mean;
        c += &dx * dx.transpose();
    }
    c / (n - 1.0)
}

const ADAPT_START: usize = 100;
const ADAPT_EVERY: usize = 50;

/// Random-walk MH on the free parameters in unconstrained coordinates, with
/// the transform Jacobian in the target. `loglik` may be an unbiased estimate
/// of the likelihood's logarithm; it is evaluated only at proposed points.
pub fn mh_chain<F>(
    theta0: &ParameterVector,
    prior: &Prior,
    proposal: &RandomWalkProposal,
    config: &McmcConfig,
    rng: &mut RandomStream,
    mut loglik: F,
) -> Result<ChainTrace>
where
    F: FnMut(&ParameterVector, &mut RandomStream) -> Result<f64>,
{
    let free = theta0.free_indices();
    if proposal.dim() != free.len() {
        return Err(Error::input(format!(
            "proposal has dimension {} but {} parameters are free",
            proposal.dim(),
            free.len()
        )));
    }
    let burn_in = config.burn_in();
    let snapshot = serde_json::to_value(config)?;
    let mut trace = ChainTrace::empty(theta0.names().to_vec(), rng.seed(), burn_in, snapshot);
    let mut prop = proposal.clone();
    let mut theta = theta0.clone();
    let mut u = theta.free_unconstrained();
    let lp0 = prior_logpdf(prior, &theta)?;
    if lp0 == f64::NEG_INFINITY {
        return Err(Error::input("initial parameters outside the prior support"));
    }
    let mut ll = degeneracy_as_neg_inf(loglik(&theta, &mut rng.fork()))?;
    let mut target = ll + lp0 + theta.free_log_jacobian(&u);
    let mut history: Vec<Vec<f64>> = Vec::new();
    for m in 0..config.iters {
        let u_new = prop.propose(&u, rng);
        let cand = theta.with_free_unconstrained(&u_new);
        let lp = prior_logpdf(prior, &cand)?;
        let mut eval_rng = rng.fork();
        let (ll_new, target_new) = if lp == f64::NEG_INFINITY || cand.values().iter().any(|v| !v.is_finite()) {
            (f64::NEG_INFINITY, f64::NEG_INFINITY)
        } else {
            let l = degeneracy_as_neg_inf(loglik(&cand, &mut eval_rng))?;
            (l, l + lp + cand.free_log_jacobian(&u_new))
        };
        let accept = mh_accept(target_new, target, 0.0, 0.0, rng);
        if accept {
            theta = cand;
            u = u_new;
            ll = ll_new;
            target = target_new;
        }
        trace.samples.push(theta.values().to_vec());
        trace.log_z.push(ll);
        trace.log_target.push(target);
        trace.accepted.push(accept);
        if prop.adapt && m < burn_in {
            history.push(u.clone());
            let k = history.len();
            if k >= ADAPT_START && k % ADAPT_EVERY == 0 && !free.is_empty() {
                let d = free.len() as f64;
                let c = sample_cov(&history) * (2.38 * 2.38 / d) + DMatrix::identity(free.len(), free.len()) * 1e-10;
                if let Ok(p) = RandomWalkProposal::new((&c + c.transpose()) * 0.5, true) {
                    prop = p;
                }
            }
        }
    }
    Ok(trace)
}

/// Particle marginal MH with a bootstrap-filter likelihood estimate.
#[allow(clippy::too_many_arguments)]
pub fn pmmh<M: StateSpaceModel>(
    model: &M,
    data: &Dataset,
    prior: &Prior,
    theta0: &ParameterVector,
    proposal: &RandomWalkProposal,
    n: usize,
    config: &McmcConfig,
    rng: &mut RandomStream,
) -> Result<ChainTrace> {
    if n < 2 {
        return Err(Error::input("PMMH needs at least two particles"));
    }
    mh_chain(theta0, prior, proposal, config, rng, |th, r| estimate_loglik(model, data, th.values(), n, r))
}

/// MH with the exact Kalman likelihood; the reference chain for particle methods.
pub fn exact_mh_lgss(
    model: &Lgss,
    data: &Dataset,
    prior: &Prior,
    theta0: &ParameterVector,
    proposal: &RandomWalkProposal,
    config: &McmcConfig,
    rng: &mut RandomStream,
) -> Result<ChainTrace> {
    mh_chain(theta0, prior, proposal, config, rng, |th, _| kalman_loglik(&model.spec_at(th.values()), data))
}

/// One block of a Gibbs sampler: an exact draw from its full conditional.
pub trait GibbsBlock<S> {
    fn sample(&mut self, state: &mut S, rng: &mut RandomStream) -> Result<()>;
}

impl<S, F: FnMut(&mut S, &mut RandomStream) -> Result<()>> GibbsBlock<S> for F {
    fn sample(&mut self, state: &mut S, rng: &mut RandomStream) -> Result<()> {
        self(state, rng)
    }
}

/// One systematic-scan sweep through `blocks`.
pub fn gibbs_sweep<S>(blocks: &mut [&mut dyn GibbsBlock<S>], mut state: S, rng: &mut RandomStream) -> Result<S> {
    for b in blocks.iter_mut() {
        b.sample(&mut state, rng)?;
    }
    Ok(state)
}

/// Sampler of `p(θ | x_{1:T}, y_{1:T})`.
pub trait ParamConditional<M: StateSpaceModel> {
    fn sample(
        &self,
        model: &M,
        traj: &[M::State],
        data: &Dataset,
        theta: &ParameterVector,
        rng: &mut RandomStream,
    ) -> Result<ParameterVector>;
}

/// Particle Gibbs: alternate a conditional SMC sweep (with ancestor sampling
/// when requested) and a parameter draw. `record` flattens states when
/// trajectories should be kept in the trace.
#[allow(clippy::too_many_arguments)]
/// Attempts at finding a first reference trajectory before giving up.
const INIT_ATTEMPTS: usize = 100;

/// Bootstrap run with history; degenerate runs are retried on fresh streams.
fn initial_reference_run<M: StateSpaceModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    rng: &mut RandomStream,
) -> Result<SmcOutput<M::State>> {
    let config = SmcConfig::new(n).with_history();
    let mut last = None;
    for _ in 0..INIT_ATTEMPTS {
        match smc_run(model, data, theta, &Bootstrap, None, &config, rng) {
            Err(e @ Error::Degeneracy { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn particle_gibbs<M: StateSpaceModel, C: ParamConditional<M> + ?Sized>(
    model: &M,
    data: &Dataset,
    prior: &Prior,
    conditional: &C,
    theta0: &ParameterVector,
    n: usize,
    ancestor_sampling: bool,
    config: &McmcConfig,
    record: Option<&dyn Fn(&M::State) -> Vec<f64>>,
    rng: &mut RandomStream,
) -> Result<ChainTrace> {
    if n < 2 {
        return Err(Error::input("particle Gibbs needs at least two particles"));
    }
    if ancestor_sampling && !model.has_transition_density() {
        return Err(Error::capability("transition density unavailable for ancestor sampling"));
    }
    if prior_logpdf(prior, theta0)? == f64::NEG_INFINITY {
        return Err(Error::input("initial parameters outside the prior support"));
    }
    let snapshot = serde_json::json!({
        "iters": config.iters,
        "burn_in": config.burn_in(),
        "n_particles": n,
        "ancestor_sampling": ancestor_sampling,
    });
    let mut trace = ChainTrace::empty(theta0.names().to_vec(), rng.seed(), config.burn_in(), snapshot);
    if record.is_some() {
        trace.trajectories = Some(Vec::with_capacity(config.iters));
    }
    let mut theta = theta0.clone();
    let init = initial_reference_run(model, data, theta.values(), n, rng)?;
    let pick = sample_categorical(&init.ensemble.norm_weights, rng)?;
    let mut reference = init.history.as_ref().expect("history requested").trace(pick);
    for _ in 0..config.iters {
        let sweep_seed = rng.next_u64();
        let out = csmc_run(model, data, theta.values(), &reference, n, ancestor_sampling, &mut RandomStream::new(sweep_seed, 0))?;
        reference = out.trajectory;
        theta = conditional.sample(model, &reference, data, &theta, rng)?;
        trace.samples.push(theta.values().to_vec());
        trace.log_z.push(out.log_z);
        trace.log_target.push(prior_logpdf(prior, &theta)?);
        trace.accepted.push(true);
        if let (Some(f), Some(tr)) = (record, trace.trajectories.as_mut()) {
            tr.push(reference.iter().map(f).collect());
        }
    }
    Ok(trace)
}
