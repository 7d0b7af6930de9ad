//! Vector-borne SEIR epidemic with coupled human and mosquito compartments.
//!
//! One step is one day. Reports arrive on a subset of days; `z` accumulates
//! newly infectious humans since the previous report and is emptied right
//! after a report is made.

use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{binomial_logpmf, mode_matched_beta, PriorDist, Prior};
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::rng::RandomStream;

pub const YAP_POPULATION: i64 = 7370;

pub const DENGUE_PARAM_NAMES: [&str; 7] = ["lambda_h", "delta_h", "gamma_h", "lambda_m", "delta_m", "gamma_m", "rho"];

/// Counts of one species, `[S, E, I, R]`.
pub type Compartments = [i64; 4];

/// Flows drawn in the transition into a state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeirFlows {
    pub tau_h: i64,
    pub e_h: i64,
    pub i_h: i64,
    pub r_h: i64,
    pub tau_m: i64,
    pub e_m: i64,
    pub i_m: i64,
    pub r_m: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeirState {
    pub human: Compartments,
    pub mosquito: Compartments,
    /// Newly infectious humans since the last report.
    pub z: i64,
    pub flows: SeirFlows,
}

impl SeirState {
    pub fn human_total(&self) -> i64 {
        self.human.iter().sum()
    }

    pub fn mosquito_total(&self) -> i64 {
        self.mosquito.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeirParams {
    pub lambda_h: f64,
    pub delta_h: f64,
    pub gamma_h: f64,
    pub lambda_m: f64,
    pub delta_m: f64,
    pub gamma_m: f64,
    pub rho: f64,
}

impl SeirParams {
    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() != 7 {
            return Err(Error::input("dengue model takes seven parameters"));
        }
        if let Some(p) = theta.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::input(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            lambda_h: theta[0],
            delta_h: theta[1],
            gamma_h: theta[2],
            lambda_m: theta[3],
            delta_m: theta[4],
            gamma_m: theta[5],
            rho: theta[6],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.lambda_h,
            self.delta_h,
            self.gamma_h,
            self.lambda_m,
            self.delta_m,
            self.gamma_m,
            self.rho,
        ]
    }
}

/// Beta priors from incubation and infection times; `γᵐ` pinned at 0.
pub fn dengue_prior() -> Prior {
    let beta = |(alpha, beta): (f64, f64)| PriorDist::Beta { alpha, beta };
    let flat = PriorDist::Beta { alpha: 1.0, beta: 1.0 };
    Prior::new()
        .with("lambda_h", flat.clone())
        .with("delta_h", beta(mode_matched_beta(4.4).expect("μ₀ > 2")))
        .with("gamma_h", beta(mode_matched_beta(4.5).expect("μ₀ > 2")))
        .with("lambda_m", flat.clone())
        .with("delta_m", beta(mode_matched_beta(6.5).expect("μ₀ > 2")))
        .with("gamma_m", PriorDist::PointMass { value: 0.0 })
        .with("rho", flat)
}

#[inline]
fn binomial(n: i64, p: f64, rng: &mut RandomStream) -> i64 {
    if n <= 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n as u64, p).expect("valid binomial").sample(rng) as i64
}

/// Model bound to a report calendar: `observed[t]` marks a report on day `t`.
#[derive(Clone, Debug)]
pub struct Dengue {
    pub population: i64,
    observed: Vec<bool>,
}

impl Dengue {
    pub fn new(population: i64, observed: Vec<bool>) -> Result<Self> {
        if population <= 0 {
            return Err(Error::input("population must be positive"));
        }
        Ok(Self { population, observed })
    }

    pub fn for_data(data: &Dataset, population: i64) -> Result<Self> {
        Self::new(population, data.mask())
    }

    fn theta(theta: &[f64]) -> SeirParams {
        SeirParams::from_slice(theta).expect("parameters validated by caller")
    }
}

impl StateSpaceModel for Dengue {
    type State = SeirState;

    fn state_dim(&self) -> usize {
        9
    }

    fn param_names(&self) -> Vec<String> {
        DENGUE_PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn sample_initial(&self, _theta: &[f64], rng: &mut RandomStream) -> SeirState {
        let n = self.population;
        let five = Poisson::new(5.0).expect("positive rate");
        let e: i64 = (five.sample(rng) as i64).min(n);
        let i: i64 = (1 + five.sample(rng) as i64).min(n - e);
        let r: i64 = rng.random_range(0..=(n - e - i));
        let u: f64 = rng.random_range(-1.0..2.0);
        let sm = (10f64.powf(u) * n as f64).round() as i64;
        SeirState {
            human: [n - e - i - r, e, i, r],
            mosquito: [sm, 0, 0, 0],
            z: 0,
            flows: SeirFlows::default(),
        }
    }

    fn sample_transition(&self, x: &SeirState, _u: &[f64], t: usize, theta: &[f64], rng: &mut RandomStream) -> SeirState {
        let p = Self::theta(theta);
        let nh = x.human_total().max(1) as f64;
        let [sh, eh, ih, rh] = x.human;
        let [sm, em, im, rm] = x.mosquito;
        let tau_h = binomial(sh, 1.0 - (-(im as f64) / nh).exp(), rng);
        let tau_m = binomial(sm, 1.0 - (-(ih as f64) / nh).exp(), rng);
        let f = SeirFlows {
            tau_h,
            e_h: binomial(tau_h, p.lambda_h, rng),
            i_h: binomial(eh, p.delta_h, rng),
            r_h: binomial(ih, p.gamma_h, rng),
            tau_m,
            e_m: binomial(tau_m, p.lambda_m, rng),
            i_m: binomial(em, p.delta_m, rng),
            r_m: binomial(im, p.gamma_m, rng),
        };
        let reported = t > 0 && self.observed.get(t - 1).copied().unwrap_or(false);
        SeirState {
            human: [sh - f.e_h, eh + f.e_h - f.i_h, ih + f.i_h - f.r_h, rh + f.r_h],
            mosquito: [sm - f.e_m, em + f.e_m - f.i_m, im + f.i_m - f.r_m, rm + f.r_m],
            z: if reported { 0 } else { x.z } + f.i_h,
            flows: f,
        }
    }

    fn observation_logpdf(&self, y: &[f64], x: &SeirState, _u: &[f64], _t: usize, theta: &[f64]) -> f64 {
        binomial_logpmf(y[0].round() as i64, x.z, theta[6])
    }

    fn sample_observation(&self, x: &SeirState, _u: &[f64], _t: usize, theta: &[f64], rng: &mut RandomStream) -> Vec<f64> {
        vec![binomial(x.z, theta[6], rng) as f64]
    }
}

/// Beta-binomial sufficient statistics `(successes, trials)` per parameter,
/// in [`DENGUE_PARAM_NAMES`] order.
pub fn dengue_counts(traj: &[SeirState], data: &Dataset) -> [(f64, f64); 7] {
    let mut c = [(0.0, 0.0); 7];
    for t in 1..traj.len() {
        let (prev, f) = (&traj[t - 1], &traj[t].flows);
        let add = |c: &mut (f64, f64), s: i64, n: i64| {
            c.0 += s as f64;
            c.1 += n as f64;
        };
        add(&mut c[0], f.e_h, f.tau_h);
        add(&mut c[1], f.i_h, prev.human[1]);
        add(&mut c[2], f.r_h, prev.human[2]);
        add(&mut c[3], f.e_m, f.tau_m);
        add(&mut c[4], f.i_m, prev.mosquito[1]);
        add(&mut c[5], f.r_m, prev.mosquito[2]);
    }
    for (t, x) in traj.iter().enumerate() {
        if let Some(y) = data.observation(t) {
            c[6].0 += y[0];
            c[6].1 += x.z as f64;
        }
    }
    c
}

/// One row of a report file.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub date: NaiveDate,
    pub cases: u64,
}

#[derive(Deserialize)]
struct ReportRow {
    date: String,
    y: f64,
}

pub fn read_reports<R: Read>(reader: R) -> Result<Vec<Report>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<Report> = Vec::new();
    for (i, rec) in rdr.deserialize::<ReportRow>().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: "date,y".into(),
            message: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(&rec.date, "%Y-%m-%d").map_err(|e| Error::Parse {
            row,
            column: "date".into(),
            message: e.to_string(),
        })?;
        if rec.y < 0.0 || rec.y.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                column: "y".into(),
                message: format!("case count {} is not a nonnegative integer", rec.y),
            });
        }
        if let Some(last) = out.last() {
            if date <= last.date {
                return Err(Error::Parse {
                    row,
                    column: "date".into(),
                    message: "dates must increase".into(),
                });
            }
        }
        out.push(Report { date, cases: rec.y as u64 });
    }
    if out.len() < 2 {
        return Err(Error::input("report file needs at least two rows"));
    }
    Ok(out)
}

pub fn read_reports_path(path: impl AsRef<Path>) -> Result<Vec<Report>> {
    read_reports(std::fs::File::open(path)?)
}

pub fn write_reports<W: std::io::Write>(reports: &[Report], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["date", "y"])?;
    for r in reports {
        wr.write_record([r.date.format("%Y-%m-%d").to_string(), r.cases.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Daily grid with a report on each report date. A lead-in as long as the
/// first reporting interval precedes the first report, so every report
/// covers a full interval of accumulation.
pub fn reports_to_dataset(reports: &[Report]) -> Result<Dataset> {
    if reports.len() < 2 {
        return Err(Error::input("at least two reports needed"));
    }
    let lead = (reports[1].date - reports[0].date).num_days() as usize;
    let span = (reports[reports.len() - 1].date - reports[0].date).num_days() as usize;
    let mut obs: Vec<Option<Vec<f64>>> = vec![None; lead + span + 1];
    for r in reports {
        let t = lead + (r.date - reports[0].date).num_days() as usize;
        obs[t] = Some(vec![r.cases as f64]);
    }
    Dataset::from_observations(obs)
}

/// Report dates: `weekly_pre` weekly reports, `daily` daily reports, then
/// `weekly_post` weekly reports.
pub fn report_calendar(start: NaiveDate, weekly_pre: usize, daily: usize, weekly_post: usize) -> Vec<NaiveDate> {
    let mut d = start;
    let mut out = Vec::with_capacity(weekly_pre + daily + weekly_post);
    for _ in 0..weekly_pre {
        out.push(d);
        d = d + chrono::Days::new(7);
    }
    for _ in 0..daily {
        out.push(d);
        d = d + chrono::Days::new(1);
    }
    if daily > 0 {
        d = d + chrono::Days::new(6);
    }
    for _ in 0..weekly_post {
        out.push(d);
        d = d + chrono::Days::new(7);
    }
    out
}

/// Parameters used to generate the synthetic substitute report series.
pub const SUBSTITUTE_THETA: [f64; 7] = [0.3, 1.0 / 4.4, 1.0 / 4.5, 0.3, 1.0 / 6.5, 0.0, 0.3];

/// Synthetic stand-in for the outbreak report series: 197 reports
/// (8 weekly, 181 daily, 8 weekly), simulated at [`SUBSTITUTE_THETA`] and
/// accepted on the first stream whose total lies within 20% of `target_total`.
pub fn synthetic_reports(target_total: u64, seed: u64) -> Result<Vec<Report>> {
    let start = NaiveDate::from_ymd_opt(2011, 6, 5).expect("valid date");
    let dates = report_calendar(start, 8, 181, 8);
    let skeleton: Vec<Report> = dates.iter().map(|&date| Report { date, cases: 0 }).collect();
    let grid = reports_to_dataset(&skeleton)?;
    let model = Dengue::for_data(&grid, YAP_POPULATION)?;
    for attempt in 0..10_000u64 {
        let mut rng = RandomStream::new(seed, attempt);
        let mut x = model.sample_initial(&SUBSTITUTE_THETA, &mut rng);
        let mut reports = Vec::with_capacity(dates.len());
        for t in 0..grid.len() {
            if t > 0 {
                x = model.sample_transition(&x, &[], t, &SUBSTITUTE_THETA, &mut rng);
            }
            if grid.is_observed(t) {
                let y = model.sample_observation(&x, &[], t, &SUBSTITUTE_THETA, &mut rng)[0] as u64;
                reports.push(Report {
                    date: dates[reports.len()],
                    cases: y,
                });
            }
        }
        let total: u64 = reports.iter().map(|r| r.cases).sum();
        let lo = target_total as f64 * 0.8;
        let hi = target_total as f64 * 1.2;
        if (lo..=hi).contains(&(total as f64)) {
            return Ok(reports);
        }
    }
    Err(Error::Domain("no simulated outbreak near the target size".into()))
}
