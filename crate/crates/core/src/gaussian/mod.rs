//! Exact linear-Gaussian inference.
//!
//! The filter and smoother are generic over [`Scalar`] so they run in either
//! precision; the `f64` instantiation serves as the oracle for the particle
//! methods.

mod twist;

pub use twist::{ekf_twisting, QuadInfo, TwistTables, TwistedProposal};

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x_t = A x_{t-1} + B u_t + v_t`, `y_t = C x_t + D u_t + e_t`,
/// `v ~ N(0, Q)`, `e ~ N(0, R)`, `x_0 ~ N(μ₁, Σ₁)`. An empty input acts as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LgssSpec<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
    pub d: DMatrix<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub mu1: DVector<T>,
    pub sigma1: DMatrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief<T: Scalar> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

#[derive(Clone, Debug)]
pub struct KalmanOutput<T: Scalar> {
    pub predicted: Vec<GaussianBelief<T>>,
    pub filtered: Vec<GaussianBelief<T>>,
    pub loglik: T,
}

#[derive(Clone, Debug)]
pub struct SmootherOutput<T: Scalar> {
    pub smoothed: Vec<GaussianBelief<T>>,
    /// `cross[t] = Cov(x_{t+1}, x_t | y)`, length `T - 1`.
    pub cross: Vec<DMatrix<T>>,
    pub filter: KalmanOutput<T>,
}

fn check_psd<T: Scalar>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::input(format!("{what} not square")));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(());
    }
    let scale = (0..n).fold(T::one(), |acc, i| acc.max(m[(i, i)].abs()));
    let tol = T::lit(1e-9) * scale;
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::input(format!("{what} not symmetric")));
            }
        }
    }
    let ev = m.clone().symmetric_eigenvalues();
    if ev.iter().any(|&e| e < -tol) {
        return Err(Error::input(format!("{what} not positive semi-definite")));
    }
    Ok(())
}

impl<T: Scalar> LgssSpec<T> {
    /// Scalar model with unit-free inputs ignored.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, mu1: f64, sigma1: f64) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, T::lit(v));
        Self {
            a: m(a),
            b: DMatrix::zeros(1, 0),
            c: m(c),
            d: DMatrix::zeros(1, 0),
            q: m(q),
            r: m(r),
            mu1: DVector::from_element(1, T::lit(mu1)),
            sigma1: m(sigma1),
        }
    }

    /// Scalar spec with a one-dimensional input entering through `b` and `d`.
    pub fn with_scalar_input(mut self, b: f64, d: f64) -> Self {
        self.b = DMatrix::from_element(self.state_dim(), 1, T::lit(b));
        self.d = DMatrix::from_element(self.obs_dim(), 1, T::lit(d));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.a.nrows();
        let ny = self.c.nrows();
        let nu = self.b.ncols();
        let ok = self.a.ncols() == nx
            && self.b.nrows() == nx
            && self.c.ncols() == nx
            && self.d.nrows() == ny
            && self.d.ncols() == nu
            && self.q.shape() == (nx, nx)
            && self.r.shape() == (ny, ny)
            && self.mu1.len() == nx
            && self.sigma1.shape() == (nx, nx);
        if !ok || nx == 0 || ny == 0 {
            return Err(Error::input("inconsistent LGSS dimensions"));
        }
        check_psd(&self.q, "Q")?;
        check_psd(&self.r, "R")?;
        check_psd(&self.sigma1, "Σ₁")?;
        Ok(())
    }

    fn input_vec(&self, u: &[f64]) -> Result<Option<DVector<T>>> {
        if u.is_empty() || self.b.ncols() == 0 && self.d.ncols() == 0 {
            return Ok(None);
        }
        if u.len() != self.b.ncols() {
            return Err(Error::input(format!(
                "input length {} but B has {} columns",
                u.len(),
                self.b.ncols()
            )));
        }
        Ok(Some(DVector::from_iterator(u.len(), u.iter().map(|&v| T::lit(v)))))
    }

    /// `A m + B u`.
    pub fn predict_mean(&self, m: &DVector<T>, u: &[f64]) -> Result<DVector<T>> {
        let mut out = &self.a * m;
        if let Some(u) = self.input_vec(u)? {
            out += &self.b * u;
        }
        Ok(out)
    }

    /// `C x + D u`.
    pub fn observe_mean(&self, x: &DVector<T>, u: &[f64]) -> Result<DVector<T>> {
        let mut out = &self.c * x;
        if let Some(u) = self.input_vec(u)? {
            out += &self.d * u;
        }
        Ok(out)
    }

    /// Spec with elements cast to another scalar type.
    pub fn cast<S: Scalar>(&self) -> LgssSpec<S> {
        let m = |x: &DMatrix<T>| x.map(|v| S::lit(v.to_f64()));
        LgssSpec {
            a: m(&self.a),
            b: m(&self.b),
            c: m(&self.c),
            d: m(&self.d),
            q: m(&self.q),
            r: m(&self.r),
            mu1: self.mu1.map(|v| S::lit(v.to_f64())),
            sigma1: m(&self.sigma1),
        }
    }
}

fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let half = T::lit(0.5);
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn psd_after_update<T: Scalar>(p: &DMatrix<T>, step: usize) -> Result<()> {
    let n = p.nrows();
    let scale = (0..n).fold(T::one(), |acc, i| acc.max(p[(i, i)].abs()));
    let tol = T::default_epsilon().sqrt() * scale;
    let ev = p.clone().symmetric_eigenvalues();
    if ev.iter().any(|&e| e < -tol || !e.is_finite()) {
        return Err(Error::Numerical {
            step,
            message: "covariance lost positive semi-definiteness".into(),
        });
    }
    Ok(())
}

/// Exact filtering moments and `ln p(y | θ)`.
pub fn kalman_filter<T: Scalar>(spec: &LgssSpec<T>, data: &Dataset) -> Result<KalmanOutput<T>> {
    spec.validate()?;
    let nx = spec.state_dim();
    let ny = spec.obs_dim();
    let two_pi = T::two_pi();
    let half = T::lit(0.5);
    let mut predicted = Vec::with_capacity(data.len());
    let mut filtered = Vec::with_capacity(data.len());
    let mut loglik = T::zero();
    let eye = DMatrix::<T>::identity(nx, nx);
    for t in 0..data.len() {
        let u = data.input(t);
        let (m_pred, p_pred) = if t == 0 {
            (spec.mu1.clone(), spec.sigma1.clone())
        } else {
            let prev: &GaussianBelief<T> = &filtered[t - 1];
            let m = spec.predict_mean(&prev.mean, u)?;
            let mut p = &spec.a * &prev.cov * spec.a.transpose() + &spec.q;
            symmetrize(&mut p);
            (m, p)
        };
        let (m_filt, p_filt) = match data.observation(t) {
            None => (m_pred.clone(), p_pred.clone()),
            Some(y) => {
                if y.len() != ny {
                    return Err(Error::input(format!("observation {t} has length {}", y.len())));
                }
                let y = DVector::from_iterator(ny, y.iter().map(|&v| T::lit(v)));
                let innov = y - spec.observe_mean(&m_pred, u)?;
                let pct = &p_pred * spec.c.transpose();
                let mut s = &spec.c * &pct + &spec.r;
                symmetrize(&mut s);
                let chol = s.clone().cholesky().ok_or_else(|| Error::Numerical {
                    step: t,
                    message: "innovation covariance not positive definite".into(),
                })?;
                let s_inv_innov = chol.solve(&innov);
                let log_det = chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .fold(T::zero(), |acc, &d| acc + d.ln())
                    * T::lit(2.0);
                loglik -= half
                    * (T::lit(ny as f64) * two_pi.ln() + log_det + innov.dot(&s_inv_innov));
                // K = P Cᵀ S⁻¹
                let k = chol.solve(&pct.transpose()).transpose();
                let m = &m_pred + &k * innov;
                let ikc = &eye - &k * &spec.c;
                let mut p = &ikc * &p_pred * ikc.transpose() + &k * &spec.r * k.transpose();
                symmetrize(&mut p);
                psd_after_update(&p, t)?;
                (m, p)
            }
        };
        predicted.push(GaussianBelief {
            mean: m_pred,
            cov: p_pred,
        });
        filtered.push(GaussianBelief {
            mean: m_filt,
            cov: p_filt,
        });
    }
    Ok(KalmanOutput {
        predicted,
        filtered,
        loglik,
    })
}

/// Exact log-likelihood shortcut.
pub fn kalman_loglik<T: Scalar>(spec: &LgssSpec<T>, data: &Dataset) -> Result<T> {
    kalman_filter(spec, data).map(|o| o.loglik)
}

/// Inverse of a symmetric PSD matrix, pseudo-inverse when singular.
fn spd_inverse<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => m
            .clone()
            .pseudo_inverse(T::default_epsilon().sqrt())
            .unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols())),
    }
}

/// Fixed-interval smoothing moments and lag-one cross-covariances.
pub fn rts_smoother<T: Scalar>(spec: &LgssSpec<T>, data: &Dataset) -> Result<SmootherOutput<T>> {
    let filter = kalman_filter(spec, data)?;
    let n = data.len();
    let mut smoothed = filter.filtered.clone();
    let mut cross = vec![DMatrix::zeros(spec.state_dim(), spec.state_dim()); n.saturating_sub(1)];
    for t in (0..n.saturating_sub(1)).rev() {
        let f = &filter.filtered[t];
        let p_next = &filter.predicted[t + 1];
        let g = &f.cov * spec.a.transpose() * spd_inverse(&p_next.cov);
        let mean = &f.mean + &g * (&smoothed[t + 1].mean - &p_next.mean);
        let mut cov = &f.cov + &g * (&smoothed[t + 1].cov - &p_next.cov) * g.transpose();
        symmetrize(&mut cov);
        cross[t] = &smoothed[t + 1].cov * g.transpose();
        smoothed[t] = GaussianBelief { mean, cov };
    }
    Ok(SmootherOutput {
        smoothed,
        cross,
        filter,
    })
}
