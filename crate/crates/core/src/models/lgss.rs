use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::dist::normal_logpdf;
use crate::error::{Error, Result};
use crate::gaussian::LgssSpec;
use crate::model::{
    DeterministicModel, DifferentiableModel, GradHess, LinearizableModel, RealState, StateSpaceModel,
};
use crate::params::ParameterVector;
use crate::rng::RandomStream;

/// Scalar entries of a one-dimensional spec that θ may override.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LgssParam {
    A,
    B,
    C,
    D,
    Q,
    R,
}

impl LgssParam {
    pub fn name(self) -> &'static str {
        match self {
            LgssParam::A => "a",
            LgssParam::B => "b",
            LgssParam::C => "c",
            LgssParam::D => "d",
            LgssParam::Q => "q",
            LgssParam::R => "r",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "a" => LgssParam::A,
            "b" => LgssParam::B,
            "c" => LgssParam::C,
            "d" => LgssParam::D,
            "q" => LgssParam::Q,
            "r" => LgssParam::R,
            _ => return Err(Error::input(format!("unknown LGSS parameter {s}"))),
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Scalars {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    q: f64,
    r: f64,
}

/// Linear-Gaussian model over a fixed [`LgssSpec`]. For one-dimensional
/// specs, θ may override any of `a, b, c, d, q, r`.
#[derive(Clone, Debug)]
pub struct Lgss {
    spec: LgssSpec<f64>,
    params: Vec<LgssParam>,
    scalar: bool,
    q_sqrt: DMatrix<f64>,
    r_sqrt: DMatrix<f64>,
    s1_sqrt: DMatrix<f64>,
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d
}

fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    match cov.clone().cholesky() {
        Some(ch) => {
            let r = x - mean;
            let sol = ch.solve(&r);
            let ld: f64 = ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + r.dot(&sol))
        }
        None => f64::NAN,
    }
}

impl Lgss {
    pub fn new(spec: LgssSpec<f64>) -> Result<Self> {
        Self::with_params(spec, &[])
    }

    pub fn with_params(spec: LgssSpec<f64>, params: &[LgssParam]) -> Result<Self> {
        spec.validate()?;
        let scalar = spec.state_dim() == 1 && spec.obs_dim() == 1 && spec.b.ncols() <= 1;
        if !params.is_empty() && !scalar {
            return Err(Error::input("θ overrides need a one-dimensional spec"));
        }
        if spec.b.ncols() == 0 && params.iter().any(|p| matches!(p, LgssParam::B | LgssParam::D)) {
            return Err(Error::input("input parameters need an input column"));
        }
        Ok(Self {
            q_sqrt: psd_sqrt(&spec.q),
            r_sqrt: psd_sqrt(&spec.r),
            s1_sqrt: psd_sqrt(&spec.sigma1),
            params: params.to_vec(),
            scalar,
            spec,
        })
    }

    /// Scalar model with unknowns named by `params`.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, mu1: f64, sigma1: f64, params: &[LgssParam]) -> Result<Self> {
        Self::with_params(LgssSpec::scalar(a, c, q, r, mu1, sigma1), params)
    }

    pub fn spec(&self) -> &LgssSpec<f64> {
        &self.spec
    }

    pub fn params(&self) -> &[LgssParam] {
        &self.params
    }

    /// Spec with θ substituted.
    pub fn spec_at(&self, theta: &[f64]) -> LgssSpec<f64> {
        let mut s = self.spec.clone();
        for (p, &v) in self.params.iter().zip(theta) {
            let m = match p {
                LgssParam::A => &mut s.a,
                LgssParam::B => &mut s.b,
                LgssParam::C => &mut s.c,
                LgssParam::D => &mut s.d,
                LgssParam::Q => &mut s.q,
                LgssParam::R => &mut s.r,
            };
            m[(0, 0)] = v;
        }
        s
    }

    /// Default parameter vector at the spec's values, with positivity bounds on variances.
    pub fn default_parameters(&self) -> ParameterVector {
        use crate::params::Interval;
        let s = self.spec_at(&[]);
        let values: Vec<f64> = self.params.iter().map(|p| self.entry(&s, *p)).collect();
        let bounds: Vec<Interval> = self
            .params
            .iter()
            .map(|p| match p {
                LgssParam::Q | LgssParam::R => Interval::POSITIVE,
                _ => Interval::REAL,
            })
            .collect();
        ParameterVector::with_bounds(self.param_names(), &values, &bounds).expect("spec values valid")
    }

    fn entry(&self, s: &LgssSpec<f64>, p: LgssParam) -> f64 {
        match p {
            LgssParam::A => s.a[(0, 0)],
            LgssParam::B => s.b[(0, 0)],
            LgssParam::C => s.c[(0, 0)],
            LgssParam::D => s.d[(0, 0)],
            LgssParam::Q => s.q[(0, 0)],
            LgssParam::R => s.r[(0, 0)],
        }
    }

    #[inline]
    fn scalars(&self, theta: &[f64]) -> Scalars {
        let s = &self.spec;
        let mut out = Scalars {
            a: s.a[(0, 0)],
            b: if s.b.ncols() == 1 { s.b[(0, 0)] } else { 0.0 },
            c: s.c[(0, 0)],
            d: if s.d.ncols() == 1 { s.d[(0, 0)] } else { 0.0 },
            q: s.q[(0, 0)],
            r: s.r[(0, 0)],
        };
        for (p, &v) in self.params.iter().zip(theta) {
            match p {
                LgssParam::A => out.a = v,
                LgssParam::B => out.b = v,
                LgssParam::C => out.c = v,
                LgssParam::D => out.d = v,
                LgssParam::Q => out.q = v,
                LgssParam::R => out.r = v,
            }
        }
        out
    }

    fn pidx(&self, p: LgssParam) -> Option<usize> {
        self.params.iter().position(|&q| q == p)
    }
}

#[inline]
fn u0(u: &[f64]) -> f64 {
    u.first().copied().unwrap_or(0.0)
}

impl StateSpaceModel for Lgss {
    type State = Vec<f64>;

    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name().to_string()).collect()
    }

    fn sample_initial(&self, _theta: &[f64], rng: &mut RandomStream) -> Vec<f64> {
        let n = self.state_dim();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        (&self.spec.mu1 + &self.s1_sqrt * z).as_slice().to_vec()
    }

    fn initial_logpdf(&self, x: &Vec<f64>, _theta: &[f64]) -> Option<f64> {
        if self.scalar {
            return Some(normal_logpdf(x[0], self.spec.mu1[0], self.spec.sigma1[(0, 0)]));
        }
        Some(mvn_logpdf(&DVector::from_column_slice(x), &self.spec.mu1, &self.spec.sigma1))
    }

    fn sample_transition(&self, x_prev: &Vec<f64>, u: &[f64], _t: usize, theta: &[f64], rng: &mut RandomStream) -> Vec<f64> {
        if self.scalar {
            let s = self.scalars(theta);
            let z: f64 = StandardNormal.sample(rng);
            return vec![s.a * x_prev[0] + s.b * u0(u) + s.q.sqrt() * z];
        }
        let n = self.state_dim();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let m = self
            .spec
            .predict_mean(&DVector::from_column_slice(x_prev), u)
            .expect("input dimension checked by caller");
        (m + &self.q_sqrt * z).as_slice().to_vec()
    }

    fn transition_logpdf(&self, x: &Vec<f64>, x_prev: &Vec<f64>, u: &[f64], _t: usize, theta: &[f64]) -> Option<f64> {
        if self.scalar {
            let s = self.scalars(theta);
            return Some(normal_logpdf(x[0], s.a * x_prev[0] + s.b * u0(u), s.q));
        }
        let m = self.spec.predict_mean(&DVector::from_column_slice(x_prev), u).ok()?;
        Some(mvn_logpdf(&DVector::from_column_slice(x), &m, &self.spec.q))
    }

    fn has_transition_density(&self) -> bool {
        true
    }

    fn observation_logpdf(&self, y: &[f64], x: &Vec<f64>, u: &[f64], _t: usize, theta: &[f64]) -> f64 {
        if self.scalar {
            let s = self.scalars(theta);
            return normal_logpdf(y[0], s.c * x[0] + s.d * u0(u), s.r);
        }
        match self.spec.observe_mean(&DVector::from_column_slice(x), u) {
            Ok(m) => mvn_logpdf(&DVector::from_column_slice(y), &m, &self.spec.r),
            Err(_) => f64::NAN,
        }
    }

    fn sample_observation(&self, x: &Vec<f64>, u: &[f64], _t: usize, theta: &[f64], rng: &mut RandomStream) -> Vec<f64> {
        if self.scalar {
            let s = self.scalars(theta);
            let z: f64 = StandardNormal.sample(rng);
            return vec![s.c * x[0] + s.d * u0(u) + s.r.sqrt() * z];
        }
        let ny = self.spec.obs_dim();
        let z = DVector::from_fn(ny, |_, _| StandardNormal.sample(rng));
        let m = self
            .spec
            .observe_mean(&DVector::from_column_slice(x), u)
            .expect("input dimension checked by caller");
        (m + &self.r_sqrt * z).as_slice().to_vec()
    }
}

impl RealState for Lgss {
    fn to_vector(&self, x: &Vec<f64>) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn from_vector(&self, v: &DVector<f64>) -> Vec<f64> {
        v.as_slice().to_vec()
    }
}

impl LinearizableModel for Lgss {
    fn initial_moments(&self, _theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        (self.spec.mu1.clone(), self.spec.sigma1.clone())
    }

    fn transition_mean(&self, x: &DVector<f64>, u: &[f64], _t: usize, theta: &[f64]) -> DVector<f64> {
        self.spec_at(theta).predict_mean(x, u).expect("input dimension")
    }

    fn transition_jacobian(&self, _x: &DVector<f64>, _u: &[f64], _t: usize, theta: &[f64]) -> DMatrix<f64> {
        self.spec_at(theta).a
    }

    fn transition_cov(&self, _t: usize, theta: &[f64]) -> DMatrix<f64> {
        self.spec_at(theta).q
    }

    fn observation_mean(&self, x: &DVector<f64>, u: &[f64], _t: usize, theta: &[f64]) -> DVector<f64> {
        self.spec_at(theta).observe_mean(x, u).expect("input dimension")
    }

    fn observation_jacobian(&self, _x: &DVector<f64>, _u: &[f64], _t: usize, theta: &[f64]) -> DMatrix<f64> {
        self.spec_at(theta).c
    }

    fn observation_cov(&self, _t: usize, theta: &[f64]) -> DMatrix<f64> {
        self.spec_at(theta).r
    }
}

impl DeterministicModel for Lgss {
    fn mean_transition(&self, x: &Vec<f64>, u: &[f64], t: usize, theta: &[f64]) -> Vec<f64> {
        self.transition_mean(&DVector::from_column_slice(x), u, t, theta).as_slice().to_vec()
    }

    fn mean_observation(&self, x: &Vec<f64>, u: &[f64], t: usize, theta: &[f64]) -> Vec<f64> {
        self.observation_mean(&DVector::from_column_slice(x), u, t, theta).as_slice().to_vec()
    }
}

/// Gradient and Hessian of `ln N(x | g·z + h·w, v)` in `(g, h, v)`, scattered
/// into the θ positions given.
fn gauss_grad(
    out: &mut GradHess,
    x: f64,
    (g, z): (f64, f64),
    (h, w): (f64, f64),
    v: f64,
    idx: [Option<usize>; 3],
) {
    let r = x - g * z - h * w;
    // derivatives of the residual-based log-density in (g, h)
    let dg = [z, w];
    let local_grad = [r * z / v, r * w / v, -0.5 / v + 0.5 * r * r / (v * v)];
    let mut local_hess = [[0.0; 3]; 3];
    for i in 0..2 {
        for j in 0..2 {
            local_hess[i][j] = -dg[i] * dg[j] / v;
        }
        local_hess[i][2] = -r * dg[i] / (v * v);
        local_hess[2][i] = local_hess[i][2];
    }
    local_hess[2][2] = 0.5 / (v * v) - r * r / (v * v * v);
    for i in 0..3 {
        let Some(pi) = idx[i] else { continue };
        out.grad[pi] += local_grad[i];
        for j in 0..3 {
            if let Some(pj) = idx[j] {
                out.hess[(pi, pj)] += local_hess[i][j];
            }
        }
    }
}

impl DifferentiableModel for Lgss {
    fn transition_grad(&self, x: &Vec<f64>, x_prev: &Vec<f64>, u: &[f64], _t: usize, theta: &[f64]) -> GradHess {
        let s = self.scalars(theta);
        let mut out = GradHess::zeros(self.params.len());
        gauss_grad(
            &mut out,
            x[0],
            (s.a, x_prev[0]),
            (s.b, u0(u)),
            s.q,
            [self.pidx(LgssParam::A), self.pidx(LgssParam::B), self.pidx(LgssParam::Q)],
        );
        out
    }

    fn observation_grad(&self, y: &[f64], x: &Vec<f64>, u: &[f64], _t: usize, theta: &[f64]) -> GradHess {
        let s = self.scalars(theta);
        let mut out = GradHess::zeros(self.params.len());
        gauss_grad(
            &mut out,
            y[0],
            (s.c, x[0]),
            (s.d, u0(u)),
            s.r,
            [self.pidx(LgssParam::C), self.pidx(LgssParam::D), self.pidx(LgssParam::R)],
        );
        out
    }
}

/// Simulate a scalar series of length `n` from `model` at `theta` with zero input.
pub fn simulate_lgss(model: &Lgss, n: usize, theta: &[f64], rng: &mut RandomStream) -> Result<(Vec<Vec<f64>>, Dataset)> {
    crate::model::simulate(model, &vec![Vec::new(); n], theta, rng)
}
