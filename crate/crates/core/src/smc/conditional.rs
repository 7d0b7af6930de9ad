//! Conditional SMC, optionally with ancestor sampling.
//!
//! The reference trajectory occupies the last particle slot at every step.
//! Resampling is multinomial; as in the unconditional filter it is skipped
//! after unobserved steps, where the weights are still uniform.

use rand::RngCore;

use super::{normalize, particle_stream, resample_multinomial, resample_stream, sample_categorical, ParticleHistory};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::rng::RandomStream;

#[derive(Clone, Debug)]
pub struct CsmcOutput<S> {
    /// New reference drawn with probability `w_T^i`.
    pub trajectory: Vec<S>,
    /// Final-step slot of the selected trajectory.
    pub selected: usize,
    pub history: ParticleHistory<S>,
    pub final_weights: Vec<f64>,
    pub log_z: f64,
}

fn degenerate(e: Error, t: usize) -> Error {
    if e.is_degeneracy() {
        Error::Degeneracy { step: t }
    } else {
        e
    }
}

/// One conditional sweep under the bootstrap proposal.
pub fn csmc_run<M: StateSpaceModel>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    reference: &[M::State],
    n: usize,
    ancestor_sampling: bool,
    rng: &mut RandomStream,
) -> Result<CsmcOutput<M::State>> {
    if n < 2 {
        return Err(Error::input("conditional SMC needs at least two particles"));
    }
    if reference.len() != data.len() {
        return Err(Error::input(format!(
            "reference length {} but {} data steps",
            reference.len(),
            data.len()
        )));
    }
    if ancestor_sampling && !model.has_transition_density() {
        return Err(Error::capability(
            "ancestor sampling needs the transition density",
        ));
    }
    let run_seed = rng.next_u64();
    let t_len = data.len();
    let last = n - 1;
    let mut hist = ParticleHistory {
        particles: Vec::with_capacity(t_len),
        ancestors: Vec::with_capacity(t_len),
    };
    let mut norm_w = vec![1.0 / n as f64; n];
    let mut prev_norm = vec![1.0 / n as f64; n];
    let mut log_w = vec![0.0; n];
    let mut log_z = 0.0;
    let mut pending = false;
    let mut as_logw = vec![0.0; n];
    let mut as_w = Vec::with_capacity(n);

    for t in 0..t_len {
        let u = data.input(t);
        let mut xs: Vec<M::State> = Vec::with_capacity(n);
        let mut anc: Vec<usize> = Vec::new();
        if t == 0 {
            for i in 0..last {
                let mut s = particle_stream(run_seed, i as u64, 0);
                xs.push(model.sample_initial(theta, &mut s));
            }
            xs.push(reference[0].clone());
        } else {
            let prev = &hist.particles[t - 1];
            if pending {
                let mut rs = resample_stream(run_seed, t);
                anc = resample_multinomial(&norm_w, last, &mut rs).map_err(|e| degenerate(e, t))?;
                let a_ref = if ancestor_sampling {
                    for i in 0..n {
                        let f = model
                            .transition_logpdf(&reference[t], &prev[i], u, t, theta)
                            .expect("checked above");
                        as_logw[i] = norm_w[i].ln() + f;
                    }
                    if normalize(&as_logw, &mut as_w) == f64::NEG_INFINITY {
                        return Err(Error::Degeneracy { step: t });
                    }
                    sample_categorical(&as_w, &mut rs).map_err(|e| degenerate(e, t))?
                } else {
                    last
                };
                anc.push(a_ref);
                prev_norm.fill(1.0 / n as f64);
                pending = false;
            } else {
                anc = (0..n).collect();
                prev_norm.clone_from(&norm_w);
            }
            for i in 0..last {
                let mut s = particle_stream(run_seed, i as u64, t);
                xs.push(model.sample_transition(&prev[anc[i]], u, t, theta, &mut s));
            }
            xs.push(reference[t].clone());
        }
        if let Some(y) = data.observation(t) {
            for i in 0..n {
                let l = model.observation_logpdf(y, &xs[i], u, t, theta);
                log_w[i] = prev_norm[i].ln() + if l.is_nan() { f64::NEG_INFINITY } else { l };
            }
            pending = true;
        } else {
            for i in 0..n {
                log_w[i] = prev_norm[i].ln();
            }
        }
        let lse = normalize(&log_w, &mut norm_w);
        if lse == f64::NEG_INFINITY {
            return Err(Error::Degeneracy { step: t });
        }
        log_z += lse;
        hist.particles.push(xs);
        hist.ancestors.push(anc);
    }
    let mut fs = resample_stream(run_seed, t_len);
    let selected = sample_categorical(&norm_w, &mut fs).map_err(|e| degenerate(e, t_len - 1))?;
    Ok(CsmcOutput {
        trajectory: hist.trace(selected),
        selected,
        history: hist,
        final_weights: norm_w,
        log_z,
    })
}
