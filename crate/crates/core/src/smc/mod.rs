//! Sequential Monte Carlo.
//!
//! Every particle draws from its own stream keyed by
//! `(run seed, particle index ⊕ step hash)`, and resampling draws from a
//! per-step stream, so the output is a pure function of the caller's stream
//! state. Resampling at step `t` happens only when the weights changed since
//! the last resampling: an unobserved step under the bootstrap proposal
//! without twisting never triggers it.

mod conditional;
mod resample;

pub use conditional::{csmc_run, CsmcOutput};
pub use resample::{
    effective_sample_size, resample, resample_multinomial, resample_systematic,
    sample_categorical, ResamplingScheme,
};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{RealState, StateSpaceModel};
use crate::rng::{step_hash, RandomStream};
use crate::stats::logsumexp;

pub(crate) const RESAMPLE_TAG: u64 = 0xC3A5_C85C_97CB_3127 | (1 << 63);

/// Stream for particle `id` at step `t`.
#[inline]
pub(crate) fn particle_stream(run_seed: u64, id: u64, t: usize) -> RandomStream {
    RandomStream::new(run_seed, id ^ step_hash(t))
}

#[inline]
pub(crate) fn resample_stream(run_seed: u64, t: usize) -> RandomStream {
    RandomStream::new(run_seed, RESAMPLE_TAG ^ step_hash(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalTag {
    Bootstrap,
    Custom,
    LocallyOptimalApprox,
}

/// Importance distribution `q_t`. Non-bootstrap proposals require the model's
/// transition density for weighting.
pub trait Proposal<M: StateSpaceModel>: Sync {
    fn tag(&self) -> ProposalTag;

    fn sample_initial(&self, model: &M, theta: &[f64], rng: &mut RandomStream) -> M::State;

    fn initial_logpdf(&self, model: &M, x: &M::State, theta: &[f64]) -> f64;

    fn sample(
        &self,
        model: &M,
        x_prev: &M::State,
        u: &[f64],
        t: usize,
        theta: &[f64],
        rng: &mut RandomStream,
    ) -> M::State;

    fn logpdf(&self, model: &M, x: &M::State, x_prev: &M::State, u: &[f64], t: usize, theta: &[f64]) -> f64;
}

/// Proposes from the model's own dynamics.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bootstrap;

impl<M: StateSpaceModel> Proposal<M> for Bootstrap {
    fn tag(&self) -> ProposalTag {
        ProposalTag::Bootstrap
    }

    fn sample_initial(&self, model: &M, theta: &[f64], rng: &mut RandomStream) -> M::State {
        model.sample_initial(theta, rng)
    }

    fn initial_logpdf(&self, model: &M, x: &M::State, theta: &[f64]) -> f64 {
        model.initial_logpdf(x, theta).unwrap_or(0.0)
    }

    fn sample(
        &self,
        model: &M,
        x_prev: &M::State,
        u: &[f64],
        t: usize,
        theta: &[f64],
        rng: &mut RandomStream,
    ) -> M::State {
        model.sample_transition(x_prev, u, t, theta, rng)
    }

    fn logpdf(&self, model: &M, x: &M::State, x_prev: &M::State, u: &[f64], t: usize, theta: &[f64]) -> f64 {
        model.transition_logpdf(x, x_prev, u, t, theta).unwrap_or(0.0)
    }
}

/// `ln ψ_t(x_t)`; the last step must return 0.
pub trait TwistingPotential<M: StateSpaceModel>: Sync {
    fn log_psi(&self, model: &M, t: usize, x: &M::State) -> f64;
}

/// `ψ ≡ 1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoTwist;

impl<M: StateSpaceModel> TwistingPotential<M> for NoTwist {
    fn log_psi(&self, _: &M, _: usize, _: &M::State) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub resampling: ResamplingScheme,
    /// Resample only when ESS < threshold · N.
    pub ess_threshold: Option<f64>,
    pub store_history: bool,
    /// Stream id per particle slot; identity when absent.
    pub stream_map: Option<Vec<u64>>,
}

impl SmcConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            resampling: ResamplingScheme::Systematic,
            ess_threshold: None,
            store_history: false,
            stream_map: None,
        }
    }

    pub fn with_resampling(mut self, scheme: ResamplingScheme) -> Self {
        self.resampling = scheme;
        self
    }

    pub fn with_history(mut self) -> Self {
        self.store_history = true;
        self
    }

    pub fn with_ess_threshold(mut self, frac: f64) -> Self {
        self.ess_threshold = Some(frac);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ess: f64,
    pub log_z_increment: f64,
    pub resampled: bool,
}

/// Final weighted particle system.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble<S> {
    pub t: usize,
    pub particles: Vec<S>,
    pub log_weights: Vec<f64>,
    pub norm_weights: Vec<f64>,
    /// `ancestors[t][i]` indexes the step `t-1` particle; identity rows mark
    /// steps without resampling. Row 0 is empty.
    pub ancestors: Vec<Vec<usize>>,
    pub log_z: f64,
}

/// All particles of every step, for trajectory traceback.
#[derive(Clone, Debug)]
pub struct ParticleHistory<S> {
    pub particles: Vec<Vec<S>>,
    pub ancestors: Vec<Vec<usize>>,
}

impl<S: Clone> ParticleHistory<S> {
    /// Ancestral line of final particle `i`.
    pub fn trace(&self, mut i: usize) -> Vec<S> {
        let n = self.particles.len();
        let mut out = Vec::with_capacity(n);
        for t in (0..n).rev() {
            out.push(self.particles[t][i].clone());
            if t > 0 {
                i = self.ancestors[t][i];
            }
        }
        out.reverse();
        out
    }

    /// Indices of the ancestral line of final particle `i`.
    pub fn trace_indices(&self, mut i: usize) -> Vec<usize> {
        let n = self.particles.len();
        let mut out = vec![0; n];
        for t in (0..n).rev() {
            out[t] = i;
            if t > 0 {
                i = self.ancestors[t][i];
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SmcOutput<S> {
    pub ensemble: ParticleEnsemble<S>,
    /// Running `ln Ẑ_t` after each step.
    pub log_z_per_step: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub history: Option<ParticleHistory<S>>,
}

impl<S> SmcOutput<S> {
    pub fn log_z(&self) -> f64 {
        self.ensemble.log_z
    }
}

/// Per-step hook, called after weighting.
pub trait SmcObserver<M: StateSpaceModel> {
    /// `ancestors[i]` indexes `prev` (identity on non-resampling steps);
    /// both are empty at `t = 0`.
    fn on_step(
        &mut self,
        t: usize,
        prev: &[M::State],
        ancestors: &[usize],
        particles: &[M::State],
        norm_weights: &[f64],
    ) -> Result<()>;
}

/// Normalize log-weights in place into `out`; returns `ln Σ exp`.
pub(crate) fn normalize(log_w: &[f64], out: &mut Vec<f64>) -> f64 {
    let lse = logsumexp(log_w);
    out.clear();
    if lse == f64::NEG_INFINITY {
        out.resize(log_w.len(), 0.0);
        return lse;
    }
    out.extend(log_w.iter().map(|&l| (l - lse).exp()));
    let s: f64 = out.iter().sum();
    for w in out.iter_mut() {
        *w /= s;
    }
    lse
}

#[inline]
fn sanitize(l: f64) -> f64 {
    if l.is_nan() {
        f64::NEG_INFINITY
    } else {
        l
    }
}

/// Propagate, weight, resample.
pub fn smc_run<M: StateSpaceModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    proposal: &dyn Proposal<M>,
    twist: Option<&dyn TwistingPotential<M>>,
    config: &SmcConfig,
    rng: &mut RandomStream,
) -> Result<SmcOutput<M::State>> {
    smc_run_observed(model, data, theta, proposal, twist, config, rng, None)
}

#[allow(clippy::too_many_arguments)]
pub fn smc_run_observed<M: StateSpaceModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    proposal: &dyn Proposal<M>,
    twist: Option<&dyn TwistingPotential<M>>,
    config: &SmcConfig,
    rng: &mut RandomStream,
    mut observer: Option<&mut dyn SmcObserver<M>>,
) -> Result<SmcOutput<M::State>> {
    let n = config.n_particles;
    if n < 2 {
        return Err(Error::input("at least two particles required"));
    }
    if data.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    if let Some(m) = &config.stream_map {
        if m.len() != n {
            return Err(Error::input("stream map length differs from particle count"));
        }
    }
    let bootstrap = proposal.tag() == ProposalTag::Bootstrap;
    if !bootstrap && !model.has_transition_density() {
        return Err(Error::capability(
            "non-bootstrap proposal needs the transition density",
        ));
    }
    let run_seed = rng.next_u64();
    let stream_id = |i: usize| config.stream_map.as_ref().map_or(i as u64, |m| m[i]);
    let t_len = data.len();

    let mut particles: Vec<M::State> = Vec::with_capacity(n);
    let mut prev: Vec<M::State> = Vec::new();
    let mut inc = vec![0.0; n];
    let mut log_w = vec![0.0; n];
    let mut norm_w = vec![1.0 / n as f64; n];
    let mut prev_norm = vec![1.0 / n as f64; n];
    let mut ancestors_hist: Vec<Vec<usize>> = Vec::with_capacity(t_len);
    let mut history = config.store_history.then(|| ParticleHistory {
        particles: Vec::with_capacity(t_len),
        ancestors: Vec::with_capacity(t_len),
    });
    let mut log_z = 0.0;
    let mut log_z_per_step = Vec::with_capacity(t_len);
    let mut diagnostics = Vec::with_capacity(t_len);
    let mut pending = false;
    let identity: Vec<usize> = (0..n).collect();
    let mut ancestors = Vec::new();

    for t in 0..t_len {
        let u = data.input(t);
        let y = data.observation(t);
        let mut resampled = false;
        if t == 0 {
            for i in 0..n {
                let mut s = particle_stream(run_seed, stream_id(i), 0);
                let x = proposal.sample_initial(model, theta, &mut s);
                let mut l = 0.0;
                if !bootstrap {
                    let p0 = model
                        .initial_logpdf(&x, theta)
                        .ok_or_else(|| Error::capability("initial density unavailable"))?;
                    l += p0 - proposal.initial_logpdf(model, &x, theta);
                }
                if let Some(y) = y {
                    l += model.observation_logpdf(y, &x, u, t, theta);
                }
                if let Some(tw) = twist {
                    l += tw.log_psi(model, t, &x);
                }
                inc[i] = sanitize(l);
                particles.push(x);
            }
            ancestors.clear();
        } else {
            let do_resample = pending
                && config
                    .ess_threshold
                    .is_none_or(|f| effective_sample_size(&norm_w) < f * n as f64);
            std::mem::swap(&mut prev, &mut particles);
            particles.clear();
            if do_resample {
                let mut rs = resample_stream(run_seed, t);
                ancestors = resample(config.resampling, &norm_w, n, &mut rs)
                    .map_err(|e| if e.is_degeneracy() { Error::Degeneracy { step: t } } else { e })?;
                prev_norm.fill(1.0 / n as f64);
                resampled = true;
                pending = false;
            } else {
                ancestors.clone_from(&identity);
                prev_norm.clone_from(&norm_w);
            }
            for i in 0..n {
                let a = ancestors[i];
                let xp = &prev[a];
                let mut s = particle_stream(run_seed, stream_id(i), t);
                let x = proposal.sample(model, xp, u, t, theta, &mut s);
                let mut l = 0.0;
                if !bootstrap {
                    let f = model
                        .transition_logpdf(&x, xp, u, t, theta)
                        .ok_or_else(|| Error::capability("transition density unavailable"))?;
                    l += f - proposal.logpdf(model, &x, xp, u, t, theta);
                }
                if let Some(y) = y {
                    l += model.observation_logpdf(y, &x, u, t, theta);
                }
                if let Some(tw) = twist {
                    l += tw.log_psi(model, t, &x) - tw.log_psi(model, t - 1, xp);
                }
                inc[i] = sanitize(l);
                particles.push(x);
            }
        }
        if !bootstrap || twist.is_some() || y.is_some() {
            pending = true;
        }
        for i in 0..n {
            log_w[i] = prev_norm[i].ln() + inc[i];
        }
        let lse = normalize(&log_w, &mut norm_w);
        if lse == f64::NEG_INFINITY {
            return Err(Error::Degeneracy { step: t });
        }
        log_z += lse;
        log_z_per_step.push(log_z);
        diagnostics.push(StepDiagnostics {
            step: t,
            ess: effective_sample_size(&norm_w),
            log_z_increment: lse,
            resampled,
        });
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(t, &prev, &ancestors, &particles, &norm_w)?;
        }
        ancestors_hist.push(ancestors.clone());
        if let Some(h) = history.as_mut() {
            h.particles.push(particles.clone());
            h.ancestors.push(ancestors.clone());
        }
    }
    Ok(SmcOutput {
        ensemble: ParticleEnsemble {
            t: t_len - 1,
            particles,
            log_weights: log_w,
            norm_weights: norm_w,
            ancestors: ancestors_hist,
            log_z,
        },
        log_z_per_step,
        diagnostics,
        history,
    })
}

/// Weighted filter means per step, collected through the observer hook.
struct MeanTracker<'a, M: RealState> {
    model: &'a M,
    means: Vec<Vec<f64>>,
}

impl<M: RealState> SmcObserver<M> for MeanTracker<'_, M> {
    fn on_step(&mut self, _: usize, _: &[M::State], _: &[usize], xs: &[M::State], w: &[f64]) -> Result<()> {
        let mut m = vec![0.0; self.model.state_dim()];
        for (x, &wi) in xs.iter().zip(w) {
            let v = self.model.to_vector(x);
            for (acc, vi) in m.iter_mut().zip(v.iter()) {
                *acc += wi * vi;
            }
        }
        self.means.push(m);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub means: Vec<Vec<f64>>,
    pub log_z: f64,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Bootstrap filter: transition proposal, weights `∝ p(y_t | x_t)`, resampling every step.
pub fn bootstrap_pf<M: RealState>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    rng: &mut RandomStream,
) -> Result<FilterOutput> {
    let mut tracker = MeanTracker {
        model,
        means: Vec::with_capacity(data.len()),
    };
    let out = smc_run_observed(
        model,
        data,
        theta,
        &Bootstrap,
        None,
        &SmcConfig::new(n),
        rng,
        Some(&mut tracker),
    )?;
    Ok(FilterOutput {
        means: tracker.means,
        log_z: out.log_z(),
        diagnostics: out.diagnostics,
    })
}

/// Write per-step diagnostics as JSON lines.
pub fn write_diagnostics_jsonl<W: std::io::Write>(diag: &[StepDiagnostics], mut w: W) -> Result<()> {
    for d in diag {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
