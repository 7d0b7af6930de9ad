//! Quadratic twisting potentials from an extended Kalman pass.
//!
//! A forward EKF supplies linearization points; a backward information
//! recursion started from `ψ_{T-1} ≡ 1` then integrates each linearized
//! observation-times-potential factor against the transition. With
//! `μ = F x + o`, `Q` the transition covariance and the factor
//! `exp(-½xᵀJx + hᵀx + k)`:
//!
//! ```text
//! J_μ = J (I + QJ)⁻¹      h_μ = (I + JQ)⁻¹ h      M = (I + QJ)⁻¹ Q
//! a   = Fᵀ J_μ F          b   = Fᵀ (h_μ − J_μ o)
//! c   = −½ oᵀJ_μ o + h_μᵀ o + ½ hᵀMh + k − ½ ln|I + QJ|
//! ```
//!
//! On a linear-Gaussian model the potentials are exact and the matched
//! proposal makes every incremental weight constant.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LinearizableModel;
use crate::rng::RandomStream;
use crate::smc::{Proposal, ProposalTag, TwistingPotential};
use rand_distr::{Distribution, StandardNormal};

/// `ln g(x) = −½ xᵀ J x + hᵀ x + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadInfo {
    pub j: DMatrix<f64>,
    pub h: DVector<f64>,
    pub k: f64,
}

impl QuadInfo {
    pub fn zero(n: usize) -> Self {
        Self {
            j: DMatrix::zeros(n, n),
            h: DVector::zeros(n),
            k: 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.j * x)) + self.h.dot(x) + self.k
    }

    fn add(&self, other: &QuadInfo) -> QuadInfo {
        QuadInfo {
            j: &self.j + &other.j,
            h: &self.h + &other.h,
            k: self.k + other.k,
        }
    }
}

/// Result of integrating a quadratic factor against `N(μ, Q)`.
struct Integrated {
    /// The integral as a function of `μ`.
    over_mean: QuadInfo,
    /// `M = (Q⁻¹ + J)⁻¹`.
    cov: DMatrix<f64>,
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn integrate(info: &QuadInfo, q: &DMatrix<f64>, step: usize) -> Result<Integrated> {
    let n = q.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let iqj = &eye + q * &info.j;
    let det = iqj.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Numerical {
            step,
            message: "I + QJ not invertible in twist recursion".into(),
        });
    }
    let inv = iqj.try_inverse().ok_or_else(|| Error::Numerical {
        step,
        message: "I + QJ not invertible in twist recursion".into(),
    })?;
    let j_mu = symmetrized(&info.j * &inv);
    let h_mu = inv.transpose() * &info.h;
    let cov = symmetrized(&inv * q);
    let k = 0.5 * info.h.dot(&(&cov * &info.h)) + info.k - 0.5 * det.ln();
    Ok(Integrated {
        over_mean: QuadInfo { j: j_mu, h: h_mu, k },
        cov,
    })
}

/// Pull a quadratic in `μ` back through `μ = F x + o`.
fn pull_back(g: &QuadInfo, f: &DMatrix<f64>, o: &DVector<f64>) -> QuadInfo {
    let jo = &g.j * o;
    QuadInfo {
        j: symmetrized(f.transpose() * &g.j * f),
        h: f.transpose() * (&g.h - &jo),
        k: -0.5 * o.dot(&jo) + g.h.dot(o) + g.k,
    }
}

fn obs_info(
    y: &[f64],
    h_mat: &DMatrix<f64>,
    offset: &DVector<f64>,
    r: &DMatrix<f64>,
    step: usize,
) -> Result<QuadInfo> {
    let chol = r.clone().cholesky().ok_or_else(|| Error::Numerical {
        step,
        message: "observation covariance not positive definite".into(),
    })?;
    let resid = DVector::from_column_slice(y) - offset;
    let r_inv_h = chol.solve(h_mat);
    let r_inv_res = chol.solve(&resid);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let ny = y.len() as f64;
    Ok(QuadInfo {
        j: symmetrized(h_mat.transpose() * r_inv_h),
        h: h_mat.transpose() * r_inv_res.clone(),
        k: -0.5 * (resid.dot(&r_inv_res) + log_det + ny * (2.0 * std::f64::consts::PI).ln()),
    })
}

/// Per-step potentials `ln ψ_t` and the linearized observation-times-potential
/// factors used by the matched proposal.
#[derive(Clone, Debug)]
pub struct TwistTables {
    /// `ln ψ_t(x) = −½ xᵀ a_t x + b_tᵀ x + c_t`; the last entry is zero.
    pub psi: Vec<QuadInfo>,
    /// Linearized `ln p(y_t | x) + ln ψ_t(x)`.
    pub combined: Vec<QuadInfo>,
    /// Approximation of `ln p(y | θ)`, exact for linear-Gaussian models.
    pub log_norm: f64,
    /// EKF filtered means, the transition linearization points.
    pub filtered_means: Vec<DVector<f64>>,
}

impl TwistTables {
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
}

/// Build twisting tables from an EKF forward pass and a backward information
/// recursion.
pub fn ekf_twisting<M: LinearizableModel>(model: &M, data: &Dataset, theta: &[f64]) -> Result<TwistTables> {
    let n = data.len();
    if n == 0 {
        return Err(Error::input("empty dataset"));
    }
    let nx = model.state_dim();
    let eye = DMatrix::<f64>::identity(nx, nx);
    let (mu1, sigma1) = model.initial_moments(theta);
    let mut filtered_means = Vec::with_capacity(n);
    let mut obs: Vec<QuadInfo> = Vec::with_capacity(n);
    let mut m = mu1.clone();
    let mut p = sigma1.clone();
    for t in 0..n {
        let u = data.input(t);
        if t > 0 {
            let f = model.transition_jacobian(&m, u, t, theta);
            let m_next = model.transition_mean(&m, u, t, theta);
            p = symmetrized(&f * &p * f.transpose() + model.transition_cov(t, theta));
            m = m_next;
        }
        match data.observation(t) {
            Some(y) => {
                let h_mat = model.observation_jacobian(&m, u, t, theta);
                let offset = model.observation_mean(&m, u, t, theta) - &h_mat * &m;
                let r = model.observation_cov(t, theta);
                obs.push(obs_info(y, &h_mat, &offset, &r, t)?);
                let innov = DVector::from_column_slice(y) - model.observation_mean(&m, u, t, theta);
                let s = symmetrized(&h_mat * &p * h_mat.transpose() + &r);
                let chol = s.cholesky().ok_or_else(|| Error::Numerical {
                    step: t,
                    message: "EKF innovation covariance not positive definite".into(),
                })?;
                let k = chol.solve(&(&h_mat * &p)).transpose();
                m = &m + &k * innov;
                let ikh = &eye - &k * &h_mat;
                p = symmetrized(&ikh * &p * ikh.transpose() + &k * &r * k.transpose());
            }
            None => obs.push(QuadInfo::zero(nx)),
        }
        filtered_means.push(m.clone());
    }

    let mut psi = vec![QuadInfo::zero(nx); n];
    let mut combined = vec![QuadInfo::zero(nx); n];
    combined[n - 1] = obs[n - 1].clone();
    for t in (1..n).rev() {
        let u = data.input(t);
        let lin = &filtered_means[t - 1];
        let f = model.transition_jacobian(lin, u, t, theta);
        let o = model.transition_mean(lin, u, t, theta) - &f * lin;
        let q = model.transition_cov(t, theta);
        let int = integrate(&combined[t], &q, t)?;
        psi[t - 1] = pull_back(&int.over_mean, &f, &o);
        combined[t - 1] = obs[t - 1].add(&psi[t - 1]);
    }
    let log_norm = if sigma1.iter().all(|&v| v == 0.0) {
        combined[0].eval(&mu1)
    } else {
        integrate(&combined[0], &sigma1, 0)?.over_mean.eval(&mu1)
    };
    Ok(TwistTables {
        psi,
        combined,
        log_norm,
        filtered_means,
    })
}

impl<M: LinearizableModel> TwistingPotential<M> for TwistTables {
    fn log_psi(&self, model: &M, t: usize, x: &M::State) -> f64 {
        self.psi[t].eval(&model.to_vector(x))
    }
}

struct StepProposal {
    j: DMatrix<f64>,
    h: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl StepProposal {
    fn new(info: &QuadInfo, q: &DMatrix<f64>, step: usize) -> Result<Self> {
        let int = integrate(info, q, step)?;
        let chol = int.cov.clone().cholesky().ok_or_else(|| Error::Numerical {
            step,
            message: "twisted proposal covariance not positive definite".into(),
        })?;
        let log_det = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        Ok(Self {
            j: info.j.clone(),
            h: info.h.clone(),
            cov: int.cov,
            chol,
            log_det,
        })
    }

    fn mean(&self, mu: &DVector<f64>) -> DVector<f64> {
        mu + &self.cov * (&self.h - &self.j * mu)
    }

    fn sample(&self, mu: &DVector<f64>, rng: &mut RandomStream) -> DVector<f64> {
        let z = DVector::from_fn(mu.len(), |_, _| StandardNormal.sample(rng));
        self.mean(mu) + self.chol.l() * z
    }

    fn logpdf(&self, x: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let r = x - self.mean(mu);
        let sol = self.chol.solve(&r);
        -0.5 * (r.len() as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + r.dot(&sol))
    }
}

/// Gaussian proposal `∝ N(x; f(x_{t-1}), Q) · exp(combined_t(x))`.
/// A point-mass initial law is proposed from directly.
pub struct TwistedProposal {
    initial: Option<StepProposal>,
    steps: Vec<Option<StepProposal>>,
}

impl TwistedProposal {
    pub fn new<M: LinearizableModel>(model: &M, tables: &TwistTables, theta: &[f64]) -> Result<Self> {
        let (_, sigma1) = model.initial_moments(theta);
        let initial = if sigma1.iter().all(|&v| v == 0.0) {
            None
        } else {
            Some(StepProposal::new(&tables.combined[0], &sigma1, 0)?)
        };
        let mut steps = vec![None];
        for t in 1..tables.len() {
            let q = model.transition_cov(t, theta);
            steps.push(Some(StepProposal::new(&tables.combined[t], &q, t)?));
        }
        Ok(Self { initial, steps })
    }
}

impl<M: LinearizableModel> Proposal<M> for TwistedProposal {
    fn tag(&self) -> ProposalTag {
        ProposalTag::LocallyOptimalApprox
    }

    fn sample_initial(&self, model: &M, theta: &[f64], rng: &mut RandomStream) -> M::State {
        match &self.initial {
            None => model.sample_initial(theta, rng),
            Some(p) => {
                let (mu1, _) = model.initial_moments(theta);
                model.from_vector(&p.sample(&mu1, rng))
            }
        }
    }

    fn initial_logpdf(&self, model: &M, x: &M::State, theta: &[f64]) -> f64 {
        match &self.initial {
            None => model.initial_logpdf(x, theta).unwrap_or(0.0),
            Some(p) => {
                let (mu1, _) = model.initial_moments(theta);
                p.logpdf(&model.to_vector(x), &mu1)
            }
        }
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
        let p = self.steps[t].as_ref().expect("steps t ≥ 1 exist");
        let mu = model.transition_mean(&model.to_vector(x_prev), u, t, theta);
        model.from_vector(&p.sample(&mu, rng))
    }

    fn logpdf(&self, model: &M, x: &M::State, x_prev: &M::State, u: &[f64], t: usize, theta: &[f64]) -> f64 {
        let p = self.steps[t].as_ref().expect("steps t ≥ 1 exist");
        let mu = model.transition_mean(&model.to_vector(x_prev), u, t, theta);
        p.logpdf(&model.to_vector(x), &mu)
    }
}
