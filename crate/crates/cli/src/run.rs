//! Experiment dispatch and artifact emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use seqid::dist::{Prior, PriorDist};
use seqid::estimators::{simulation_error, twisted_run};
use seqid::gaussian::{kalman_loglik, LgssSpec};
use seqid::io::{read_tank_series_path, summarize_pooled, write_chain_jsonl, write_learner_trace_csv, write_summary_csv};
use seqid::learn::conjugate::{DengueConditional, LgssVarianceConditional, TankConditional, TankKUpdate};
use seqid::learn::{
    exact_mh_lgss, gradient_search, particle_gibbs, pem_lgss, pmmh, psaem, ChainTrace, EmConfig, McmcConfig,
    ParamConditional, RandomWalkProposal, SearchRecord,
};
use seqid::models::dengue::{read_reports_path, reports_to_dataset, synthetic_reports};
use seqid::models::lgss::simulate_lgss;
use seqid::models::watertank::{synthetic_tank_data, TankInitial, THETA_HAT, THETA_INIT};
use seqid::models::{dengue_prior, Dengue, Lgss, LgssParam, WaterTank};
use seqid::smc::{bootstrap_pf, smc_run, write_diagnostics_jsonl, Bootstrap, SmcConfig, StepDiagnostics};
use seqid::{Dataset, ParameterVector, RandomStream, StateSpaceModel};

use crate::config::{AlgorithmId, ExperimentConfig, ModelConfig};
use crate::Failure;

pub struct RunOptions {
    pub force: bool,
    pub chains: usize,
    pub output: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
}

/// Stream id reserved for synthetic data generation.
const DATA_STREAM: u64 = u64::MAX;
/// Outbreak size the synthetic dengue series is drawn near.
const DENGUE_SYNTHETIC_TOTAL: u64 = 978;
/// Length of the synthetic water-tank series.
const TANK_SYNTHETIC_LENGTH: usize = 1024;
/// Scalar LGSS used by `lgss-demo`: a, c, q, r, μ₁, Σ₁.
const DEMO_LGSS: [f64; 6] = [0.8, 1.0, 0.5, 1.0, 0.0, 1.0];

#[derive(Default)]
struct Artifacts {
    summary: Map<String, Value>,
    files: BTreeMap<String, Vec<u8>>,
    inputs: Vec<PathBuf>,
}

enum Problem {
    Lgss { model: Lgss, data: Dataset },
    Tank { model: WaterTank, est: Dataset, val: Option<Dataset> },
    Dengue { model: Dengue, data: Dataset },
}

struct Setup {
    problem: Problem,
    prior: Prior,
    theta0: ParameterVector,
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf, Failure> {
    check_compatibility(config, opts)?;
    let dir = output_dir(config, opts);
    prepare_output(&dir, opts.force)?;
    let start = Instant::now();
    let mut art = Artifacts::default();
    let setup = load(config, &mut art)?;
    execute(config, opts, &setup, &mut art)?;
    let wall = start.elapsed().as_secs_f64();

    let mut inputs = Vec::new();
    for p in &art.inputs {
        let bytes = std::fs::read(p)?;
        inputs.push(json!({ "path": p.display().to_string(), "sha256": format!("{:x}", Sha256::digest(&bytes)) }));
    }
    let manifest = json!({
        "tool": "seqid",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "chains": opts.chains,
        "config": serde_json::to_value(config)?,
        "inputs": inputs,
        "files": art.files.keys().collect::<Vec<_>>(),
    });
    let resolved = toml::to_string(config).map_err(|e| Failure::config(format!("config serialization: {e}")))?;
    art.files.insert("config.toml".into(), resolved.into_bytes());
    art.files.insert("manifest.json".into(), pretty(&manifest)?);
    art.files.insert("summary.json".into(), pretty(&Value::Object(art.summary.clone()))?);
    art.files.insert("timing.json".into(), pretty(&json!({ "wall_seconds": wall, "threads": opts.chains }))?);
    for (name, bytes) in &art.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    log::info!("wrote {} files to {} in {wall:.2} s", art.files.len(), dir.display());
    Ok(dir)
}

fn pretty(v: &Value) -> Result<Vec<u8>, Failure> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn output_dir(config: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    if let Some(o) = opts.output.as_ref().or(config.output.as_ref()) {
        return o.clone();
    }
    let name = config.name.clone().unwrap_or_else(|| {
        let alg = serde_json::to_value(config.algorithm.id).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        format!("{}-{alg}-seed{}", config.model.id(), config.seed)
    });
    opts.output_root.clone().unwrap_or_else(|| PathBuf::from("seqid-runs")).join(name)
}

fn prepare_output(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Failure::config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn lgss_unknowns(config: &ExperimentConfig) -> Option<&[String]> {
    match &config.model {
        ModelConfig::LgssDemo { unknowns, .. } | ModelConfig::Lgss { unknowns, .. } => Some(unknowns),
        _ => None,
    }
}

/// Model/algorithm pairs that cannot run, decided before any data is read.
fn check_compatibility(config: &ExperimentConfig, opts: &RunOptions) -> Result<(), Failure> {
    use AlgorithmId::*;
    let alg = config.algorithm.id;
    let reason: Option<String> = match (&config.model, alg) {
        (ModelConfig::Dengue { .. }, Pgas) => {
            Some("transition density unavailable: the dengue model is sample-only, so pgas cannot run; use pg".into())
        }
        (ModelConfig::Dengue { .. }, TwistedSmc) => Some("the dengue model has no linearization for EKF twisting".into()),
        (ModelConfig::Dengue { .. }, Gradsearch) => Some("the dengue model provides no parameter gradients".into()),
        (ModelConfig::Dengue { .. }, Psaem) => Some("the dengue model has no weighted M-step".into()),
        (ModelConfig::Dengue { .. } | ModelConfig::Watertank { .. }, Pem) => {
            Some("exact EM needs a linear-Gaussian model; use psaem".into())
        }
        (ModelConfig::Dengue { .. } | ModelConfig::Watertank { .. }, Mh) => {
            Some("exact MH needs a closed-form likelihood; use pmmh".into())
        }
        _ => None,
    };
    if let Some(r) = reason {
        return Err(Failure::incompatible(r));
    }
    if let Some(unknowns) = lgss_unknowns(config) {
        if matches!(alg, Pg | Pgas) && unknowns.iter().any(|u| u != "q" && u != "r") {
            return Err(Failure::incompatible("particle Gibbs on LGSS has conjugate updates for q and r only"));
        }
        if alg == Pem && unknowns.iter().any(|u| u == "b" || u == "d") {
            return Err(Failure::incompatible("exact EM does not update b or d"));
        }
    }
    if opts.chains > 1 && !alg.is_chain() {
        return Err(Failure::config("--chains applies to mh, pmmh, pg and pgas only"));
    }
    Ok(())
}

fn build_prior(names: &[String], defaults: Prior, overrides: &BTreeMap<String, PriorDist>) -> Result<Prior, Failure> {
    if let Some(bad) = overrides.keys().find(|k| !names.contains(k)) {
        return Err(Failure::config(format!("prior given for unknown parameter {bad:?}")));
    }
    let mut prior = Prior::new();
    for n in names {
        let d = overrides.get(n).or_else(|| defaults.get(n)).cloned();
        if let Some(d) = d {
            prior = prior.with(n.clone(), d);
        }
    }
    prior.validate()?;
    Ok(prior)
}

fn start_values(names: &[String], mut values: Vec<f64>, theta0: &BTreeMap<String, f64>) -> Result<Vec<f64>, Failure> {
    for (k, v) in theta0 {
        let i = names
            .iter()
            .position(|n| n == k)
            .ok_or_else(|| Failure::config(format!("theta0 names unknown parameter {k:?}")))?;
        values[i] = *v;
    }
    Ok(values)
}

fn lgss_default_prior(names: &[String]) -> Prior {
    let mut p = Prior::new();
    for n in names {
        let d = match n.as_str() {
            "q" | "r" => PriorDist::InverseGamma { shape: 2.0, scale: 1.0 },
            _ => PriorDist::Gaussian { mean: 0.0, var: 10.0 },
        };
        p = p.with(n.clone(), d);
    }
    p
}

fn load(config: &ExperimentConfig, art: &mut Artifacts) -> Result<Setup, Failure> {
    let alg = &config.algorithm;
    let data_path = || {
        config
            .data
            .path
            .clone()
            .ok_or_else(|| Failure::config("data.path is required for this model (or set data.synthetic_seed)"))
    };
    match &config.model {
        ModelConfig::LgssDemo { length, unknowns } => {
            let params = parse_lgss_params(unknowns)?;
            let [a, c, q, r, mu1, s1] = DEMO_LGSS;
            let model = Lgss::scalar(a, c, q, r, mu1, s1, &params)?;
            let truth = model.default_parameters();
            let (_, data) = simulate_lgss(&model, *length, truth.values(), &mut RandomStream::new(config.seed, DATA_STREAM))?;
            art.summary.insert("data".into(), json!({ "source": "simulated", "length": length }));
            lgss_setup(model, data, config)
        }
        ModelConfig::Lgss { a, c, q, r, b, d, mu1, sigma1, unknowns } => {
            let params = parse_lgss_params(unknowns)?;
            let mut spec = LgssSpec::scalar(*a, *c, *q, *r, *mu1, *sigma1);
            if b.is_some() || d.is_some() {
                spec = spec.with_scalar_input(b.unwrap_or(0.0), d.unwrap_or(0.0));
            }
            let model = Lgss::with_params(spec, &params)?;
            let path = data_path()?;
            let data = Dataset::read_csv_path(&path)?;
            art.inputs.push(path);
            lgss_setup(model, data, config)
        }
        ModelConfig::Watertank { fixed, initial, initial_var } => {
            let (est, val) = match config.data.synthetic_seed {
                Some(s) => {
                    let (e, v) = synthetic_tank_data(TANK_SYNTHETIC_LENGTH, &THETA_HAT, &mut RandomStream::new(s, DATA_STREAM))?;
                    art.summary.insert("data".into(), json!({ "source": "synthetic", "seed": s, "theta": THETA_HAT }));
                    (e, Some(v))
                }
                None => {
                    let path = data_path()?;
                    let est = read_tank_series_path(&path)?;
                    art.inputs.push(path);
                    let val = match &config.data.validation {
                        Some(v) => {
                            art.inputs.push(v.clone());
                            Some(read_tank_series_path(v)?)
                        }
                        None => None,
                    };
                    (est, val)
                }
            };
            let mut model = WaterTank::for_data(&est)?;
            let mean = match (initial, &model.initial) {
                (Some(x), _) => *x,
                (None, TankInitial::Fixed(x) | TankInitial::Gaussian { mean: x, .. }) => *x,
            };
            model.initial = match initial_var {
                Some(var) if var.iter().all(|v| *v > 0.0) => TankInitial::Gaussian { mean, var: *var },
                Some(_) => return Err(Failure::config("initial_var entries must be positive")),
                None => TankInitial::Fixed(mean),
            };
            let names = model.param_names();
            if let Some(bad) = fixed.iter().find(|f| !names.contains(f)) {
                return Err(Failure::config(format!("fixed names unknown parameter {bad:?}")));
            }
            let values = start_values(&names, THETA_INIT.to_vec(), &alg.theta0)?;
            let mut defaults = Prior::new();
            for (i, n) in names.iter().enumerate() {
                let d = if fixed.contains(n) {
                    PriorDist::PointMass { value: values[i] }
                } else if i < 6 {
                    PriorDist::Gaussian { mean: 0.0, var: 1.0 }
                } else {
                    PriorDist::InverseGamma { shape: 2.0, scale: 1e-3 }
                };
                defaults = defaults.with(n.clone(), d);
            }
            let mut overrides = config.prior.clone();
            for f in fixed {
                overrides.remove(f);
            }
            let prior = build_prior(&names, defaults, &overrides)?;
            let theta0 = prior.parameters(&names, &values)?;
            Ok(Setup { problem: Problem::Tank { model, est, val }, prior, theta0 })
        }
        ModelConfig::Dengue { population } => {
            let reports = match config.data.synthetic_seed {
                Some(s) => {
                    art.summary.insert("data".into(), json!({ "source": "synthetic", "seed": s }));
                    synthetic_reports(DENGUE_SYNTHETIC_TOTAL, s)?
                }
                None => {
                    let path = data_path()?;
                    let r = read_reports_path(&path)?;
                    art.inputs.push(path);
                    r
                }
            };
            let data = reports_to_dataset(&reports)?;
            let model = Dengue::for_data(&data, *population)?;
            let names = model.param_names();
            let prior = build_prior(&names, dengue_prior(), &config.prior)?;
            let means: Vec<f64> = names.iter().map(|n| prior_mean(prior.get(n))).collect();
            let values = start_values(&names, means, &alg.theta0)?;
            let theta0 = prior.parameters(&names, &values)?;
            Ok(Setup { problem: Problem::Dengue { model, data }, prior, theta0 })
        }
    }
}

fn prior_mean(d: Option<&PriorDist>) -> f64 {
    match d {
        Some(PriorDist::Beta { alpha, beta }) => alpha / (alpha + beta),
        Some(PriorDist::PointMass { value }) => *value,
        Some(PriorDist::Gaussian { mean, .. }) => *mean,
        Some(PriorDist::Uniform { lo, hi }) => 0.5 * (lo + hi),
        Some(PriorDist::InverseGamma { shape, scale }) if *shape > 1.0 => scale / (shape - 1.0),
        Some(PriorDist::InverseGamma { shape, scale }) => scale / (shape + 1.0),
        None => 0.5,
    }
}

fn parse_lgss_params(unknowns: &[String]) -> Result<Vec<LgssParam>, Failure> {
    let mut out = Vec::with_capacity(unknowns.len());
    for u in unknowns {
        let p = LgssParam::parse(u)?;
        if out.contains(&p) {
            return Err(Failure::config(format!("unknown {u:?} listed twice")));
        }
        out.push(p);
    }
    Ok(out)
}

fn lgss_setup(model: Lgss, data: Dataset, config: &ExperimentConfig) -> Result<Setup, Failure> {
    let names = model.param_names();
    let prior = build_prior(&names, lgss_default_prior(&names), &config.prior)?;
    let values = start_values(&names, model.default_parameters().values().to_vec(), &config.algorithm.theta0)?;
    let theta0 = prior.parameters(&names, &values)?;
    Ok(Setup { problem: Problem::Lgss { model, data }, prior, theta0 })
}

fn theta_map(theta: &ParameterVector) -> Value {
    Value::Object(theta.names().iter().cloned().zip(theta.values().iter().map(|&v| json!(v))).collect())
}

fn mcmc_config(config: &ExperimentConfig) -> McmcConfig {
    McmcConfig {
        iters: config.algorithm.iters(),
        burn_in: config.algorithm.burn_in,
    }
}

fn proposal(config: &ExperimentConfig, theta0: &ParameterVector) -> Result<RandomWalkProposal, Failure> {
    let dim = theta0.free_indices().len();
    let sds = config.algorithm.proposal_sd.clone().unwrap_or_else(|| vec![0.1; dim]);
    if sds.len() != dim {
        return Err(Failure::config(format!(
            "proposal_sd has {} entries for {dim} free parameters",
            sds.len()
        )));
    }
    let mut p = RandomWalkProposal::diagonal(&sds)?;
    p.adapt = config.algorithm.adapt;
    Ok(p)
}

fn diagnostics_summary(diag: &[StepDiagnostics]) -> Value {
    let ess: Vec<f64> = diag.iter().map(|d| d.ess).collect();
    json!({
        "steps": diag.len(),
        "resampled": diag.iter().filter(|d| d.resampled).count(),
        "min_ess": ess.iter().copied().fold(f64::INFINITY, f64::min),
        "mean_ess": seqid::stats::mean(&ess),
    })
}

fn diagnostics_bytes(diag: &[StepDiagnostics]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_diagnostics_jsonl(diag, &mut buf)?;
    Ok(buf)
}

fn means_csv(means: &[Vec<f64>]) -> Vec<u8> {
    let dim = means.first().map_or(0, Vec::len);
    let mut s = String::from("t");
    for i in 0..dim {
        s.push_str(&format!(",x{}", i + 1));
    }
    s.push('\n');
    for (t, m) in means.iter().enumerate() {
        s.push_str(&t.to_string());
        for v in m {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn learner_csv(names: &[String], records: &[SearchRecord]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_learner_trace_csv(names, records, &mut buf)?;
    Ok(buf)
}

/// Deterministic-rollout errors of the tank model at `theta`.
fn tank_errors(model: &WaterTank, est: &Dataset, val: Option<&Dataset>, theta: &[f64]) -> Result<Value, Failure> {
    let x0 = |d: &Dataset| -> Result<[f64; 2], Failure> {
        let y0 = d.observation(0).ok_or_else(|| Failure::config("first observation missing"))?[0];
        Ok([6.0, y0])
    };
    let e_est = simulation_error(model, est, theta, &x0(est)?)?;
    let e_val = match val {
        Some(v) => json!(simulation_error(model, v, theta, &x0(v)?)?),
        None => Value::Null,
    };
    Ok(json!({ "estimation": e_est, "validation": e_val }))
}

fn execute(config: &ExperimentConfig, opts: &RunOptions, setup: &Setup, art: &mut Artifacts) -> Result<(), Failure> {
    let alg = &config.algorithm;
    let n = alg.n_particles;
    let mut rng = RandomStream::new(config.seed, 0);
    let theta0 = &setup.theta0;
    art.summary.insert("model".into(), json!(config.model.id()));
    art.summary.insert("algorithm".into(), serde_json::to_value(alg.id)?);
    art.summary.insert("seed".into(), json!(config.seed));
    art.summary.insert("theta0".into(), theta_map(theta0));

    match alg.id {
        AlgorithmId::Smc => {
            let (log_z, diag) = match &setup.problem {
                Problem::Lgss { model, data } => {
                    let out = bootstrap_pf(model, data, theta0.values(), n, &mut rng)?;
                    art.files.insert("filter_means.csv".into(), means_csv(&out.means));
                    let exact = kalman_loglik(&model.spec_at(theta0.values()), data)?;
                    art.summary.insert("log_lik_kalman".into(), json!(exact));
                    (out.log_z, out.diagnostics)
                }
                Problem::Tank { model, est, .. } => {
                    let out = bootstrap_pf(model, est, theta0.values(), n, &mut rng)?;
                    art.files.insert("filter_means.csv".into(), means_csv(&out.means));
                    (out.log_z, out.diagnostics)
                }
                Problem::Dengue { model, data } => {
                    let out = smc_run(model, data, theta0.values(), &Bootstrap, None, &SmcConfig::new(n), &mut rng)?;
                    (out.log_z(), out.diagnostics)
                }
            };
            art.summary.insert("log_z".into(), json!(log_z));
            art.summary.insert("n_particles".into(), json!(n));
            art.summary.insert("diagnostics".into(), diagnostics_summary(&diag));
            art.files.insert("diagnostics.jsonl".into(), diagnostics_bytes(&diag)?);
        }
        AlgorithmId::TwistedSmc => {
            let cfg = SmcConfig::new(n);
            let (log_z, diag) = match &setup.problem {
                Problem::Lgss { model, data } => {
                    let out = twisted_run(model, data, theta0.values(), alg.twist_mode, &cfg, &mut rng)?;
                    let exact = kalman_loglik(&model.spec_at(theta0.values()), data)?;
                    art.summary.insert("log_lik_kalman".into(), json!(exact));
                    (out.log_z(), out.diagnostics)
                }
                Problem::Tank { model, est, .. } => {
                    let out = twisted_run(model, est, theta0.values(), alg.twist_mode, &cfg, &mut rng)?;
                    (out.log_z(), out.diagnostics)
                }
                Problem::Dengue { .. } => unreachable!("rejected by the compatibility check"),
            };
            art.summary.insert("log_z".into(), json!(log_z));
            art.summary.insert("n_particles".into(), json!(n));
            art.summary.insert("twist_mode".into(), serde_json::to_value(alg.twist_mode)?);
            art.summary.insert("diagnostics".into(), diagnostics_summary(&diag));
            art.files.insert("diagnostics.jsonl".into(), diagnostics_bytes(&diag)?);
        }
        AlgorithmId::Gradsearch => {
            let mut search = alg.search.clone();
            search.max_iters = alg.iters.unwrap_or(search.max_iters);
            let state = match &setup.problem {
                Problem::Lgss { model, data } => gradient_search(model, data, theta0, n, &search, &mut rng)?,
                Problem::Tank { model, est, .. } => gradient_search(model, est, theta0, n, &search, &mut rng)?,
                Problem::Dengue { .. } => unreachable!("rejected by the compatibility check"),
            };
            learner_outputs(setup, &state.theta, &state.trace, art)?;
        }
        AlgorithmId::Psaem => {
            let em = EmConfig {
                iters: alg.iters(),
                n_particles: n,
                step_exponent: alg.step_exponent,
                full_steps: alg.full_steps,
            };
            let (theta, records) = match &setup.problem {
                Problem::Lgss { model, data } => psaem(model, data, theta0, &em, &mut rng)?,
                Problem::Tank { model, est, .. } => psaem(model, est, theta0, &em, &mut rng)?,
                Problem::Dengue { .. } => unreachable!("rejected by the compatibility check"),
            };
            art.summary.insert("step_exponent".into(), json!(alg.step_exponent));
            learner_outputs(setup, &theta, &records, art)?;
        }
        AlgorithmId::Pem => {
            let Problem::Lgss { model, data } = &setup.problem else {
                unreachable!("rejected by the compatibility check")
            };
            let free: Vec<LgssParam> = theta0
                .free_indices()
                .iter()
                .map(|&i| LgssParam::parse(&theta0.names()[i]))
                .collect::<seqid::Result<_>>()?;
            let template = model.spec_at(theta0.values());
            let trace = pem_lgss(&template, &free, data, alg.iters())?;
            let names: Vec<String> = model.param_names();
            let records: Vec<SearchRecord> = trace
                .specs
                .iter()
                .zip(&trace.loglik)
                .enumerate()
                .map(|(k, (spec, &ll))| SearchRecord {
                    iter: k,
                    theta: model.params().iter().map(|&p| lgss_entry(spec, p)).collect(),
                    log_z: ll,
                    step: 1.0,
                    accepted: true,
                })
                .collect();
            let last = records.last().expect("trace includes the start");
            let theta = theta0.with_free_values(
                &theta0.free_indices().iter().map(|&i| last.theta[i]).collect::<Vec<_>>(),
            );
            art.files.insert("trace.csv".into(), learner_csv(&names, &records)?);
            art.summary.insert("theta".into(), theta_map(&theta));
            art.summary.insert("log_lik_kalman".into(), json!(last.log_z));
            art.summary.insert("iterations".into(), json!(records.len() - 1));
        }
        AlgorithmId::Mh | AlgorithmId::Pmmh | AlgorithmId::Pg | AlgorithmId::Pgas => {
            let mcfg = mcmc_config(config);
            let chains = run_chains(config, opts.chains, |r| chain(config, setup, &mcfg, r))?;
            let names = theta0.names().to_vec();
            let samples: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.samples.clone()).collect();
            let burn = mcfg.burn_in();
            let rows = summarize_pooled(&names, &samples, burn)?;
            let mut csv = Vec::new();
            write_summary_csv(&rows, &mut csv)?;
            art.files.insert("posterior.csv".into(), csv);
            for (i, c) in chains.iter().enumerate() {
                let mut buf = Vec::new();
                write_chain_jsonl(c, &mut buf)?;
                let name = if chains.len() == 1 { "chain.jsonl".to_string() } else { format!("chain-{i}.jsonl") };
                art.files.insert(name, buf);
            }
            art.summary.insert("iters".into(), json!(mcfg.iters));
            art.summary.insert("burn_in".into(), json!(burn));
            art.summary.insert("chains".into(), json!(chains.len()));
            art.summary.insert("n_particles".into(), json!(n));
            art.summary.insert(
                "acceptance_rate".into(),
                json!(chains.iter().map(ChainTrace::acceptance_rate).collect::<Vec<_>>()),
            );
            art.summary.insert("posterior".into(), serde_json::to_value(&rows)?);
        }
    }
    Ok(())
}

fn lgss_entry(spec: &LgssSpec<f64>, p: LgssParam) -> f64 {
    let m = match p {
        LgssParam::A => &spec.a,
        LgssParam::B => &spec.b,
        LgssParam::C => &spec.c,
        LgssParam::D => &spec.d,
        LgssParam::Q => &spec.q,
        LgssParam::R => &spec.r,
    };
    m.get((0, 0)).copied().unwrap_or(0.0)
}

fn learner_outputs(setup: &Setup, theta: &ParameterVector, records: &[SearchRecord], art: &mut Artifacts) -> Result<(), Failure> {
    art.files.insert("trace.csv".into(), learner_csv(theta.names(), records)?);
    art.summary.insert("theta".into(), theta_map(theta));
    art.summary.insert("iterations".into(), json!(records.len()));
    art.summary.insert("log_z_last".into(), json!(records.last().map(|r| r.log_z)));
    match &setup.problem {
        Problem::Lgss { model, data } => {
            art.summary.insert("log_lik_kalman".into(), json!(kalman_loglik(&model.spec_at(theta.values()), data)?));
        }
        Problem::Tank { model, est, val } => {
            art.summary.insert("e_rms".into(), tank_errors(model, est, val.as_ref(), theta.values())?);
        }
        Problem::Dengue { .. } => {}
    }
    Ok(())
}

/// `k` chains, chain `i` on stream `split(i)` of the run seed, one thread each.
fn run_chains<F>(config: &ExperimentConfig, k: usize, f: F) -> Result<Vec<ChainTrace>, Failure>
where
    F: Fn(&mut RandomStream) -> Result<ChainTrace, Failure> + Sync,
{
    let base = RandomStream::new(config.seed, 0);
    if k == 1 {
        return Ok(vec![f(&mut base.split(0))?]);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|i| {
                let mut r = base.split(i as u64);
                let f = &f;
                s.spawn(move || f(&mut r))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    })
}

fn pg_run<M: StateSpaceModel, C: ParamConditional<M>>(
    model: &M,
    data: &Dataset,
    setup: &Setup,
    cond: &C,
    config: &ExperimentConfig,
    mcfg: &McmcConfig,
    rng: &mut RandomStream,
) -> Result<ChainTrace, Failure> {
    let ancestor = config.algorithm.id == AlgorithmId::Pgas;
    let n = config.algorithm.n_particles;
    Ok(particle_gibbs(model, data, &setup.prior, cond, &setup.theta0, n, ancestor, mcfg, None, rng)?)
}

fn chain(config: &ExperimentConfig, setup: &Setup, mcfg: &McmcConfig, rng: &mut RandomStream) -> Result<ChainTrace, Failure> {
    let alg = &config.algorithm;
    let n = alg.n_particles;
    let (prior, theta0) = (&setup.prior, &setup.theta0);
    match (alg.id, &setup.problem) {
        (AlgorithmId::Mh, Problem::Lgss { model, data }) => {
            Ok(exact_mh_lgss(model, data, prior, theta0, &proposal(config, theta0)?, mcfg, rng)?)
        }
        (AlgorithmId::Pmmh, Problem::Lgss { model, data }) => {
            Ok(pmmh(model, data, prior, theta0, &proposal(config, theta0)?, n, mcfg, rng)?)
        }
        (AlgorithmId::Pmmh, Problem::Tank { model, est, .. }) => {
            Ok(pmmh(model, est, prior, theta0, &proposal(config, theta0)?, n, mcfg, rng)?)
        }
        (AlgorithmId::Pmmh, Problem::Dengue { model, data }) => {
            Ok(pmmh(model, data, prior, theta0, &proposal(config, theta0)?, n, mcfg, rng)?)
        }
        (AlgorithmId::Pg | AlgorithmId::Pgas, Problem::Lgss { model, data }) => {
            let cond = LgssVarianceConditional::new(model, prior, theta0)?;
            pg_run(model, data, setup, &cond, config, mcfg, rng)
        }
        (AlgorithmId::Pg | AlgorithmId::Pgas, Problem::Tank { model, est, .. }) => {
            let k_update = match alg.tank_k_rw_scale {
                Some(scale) => TankKUpdate::RandomWalk { scale, steps: 5 },
                None => TankKUpdate::Gaussian,
            };
            let cond = TankConditional::new(prior, theta0, k_update)?;
            pg_run(model, est, setup, &cond, config, mcfg, rng)
        }
        (AlgorithmId::Pg, Problem::Dengue { model, data }) => {
            let cond = DengueConditional::new(prior, theta0)?;
            pg_run(model, data, setup, &cond, config, mcfg, rng)
        }
        _ => unreachable!("rejected by the compatibility check"),
    }
}
