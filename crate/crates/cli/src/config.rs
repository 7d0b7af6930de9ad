//! Experiment configuration: one TOML file, with dotted-key overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqid::dist::PriorDist;
use seqid::estimators::TwistMode;
use seqid::learn::SearchConfig;

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output subdirectory name under the output root.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; overrides the root/name rule.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub algorithm: AlgorithmConfig,
    /// Per-parameter priors replacing the model defaults.
    #[serde(default)]
    pub prior: BTreeMap<String, PriorDist>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Scalar LGSS simulated from `seed`; needs no data file.
    LgssDemo {
        #[serde(default = "default_demo_length")]
        length: usize,
        #[serde(default = "default_unknowns")]
        unknowns: Vec<String>,
    },
    /// Scalar LGSS on a `t,u…,y…` CSV file.
    Lgss {
        a: f64,
        c: f64,
        q: f64,
        r: f64,
        #[serde(default)]
        b: Option<f64>,
        #[serde(default)]
        d: Option<f64>,
        #[serde(default)]
        mu1: f64,
        #[serde(default = "one")]
        sigma1: f64,
        #[serde(default = "default_unknowns")]
        unknowns: Vec<String>,
    },
    Watertank {
        /// Parameters pinned at their starting values.
        #[serde(default)]
        fixed: Vec<String>,
        /// Initial levels; defaults to `[6, y₁]`.
        #[serde(default)]
        initial: Option<[f64; 2]>,
        /// Gaussian spread of the initial levels; absent means a point mass.
        #[serde(default)]
        initial_var: Option<[f64; 2]>,
    },
    Dengue {
        #[serde(default = "default_population")]
        population: i64,
    },
}

impl ModelConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ModelConfig::LgssDemo { .. } => "lgss-demo",
            ModelConfig::Lgss { .. } => "lgss",
            ModelConfig::Watertank { .. } => "watertank",
            ModelConfig::Dengue { .. } => "dengue",
        }
    }
}

fn default_demo_length() -> usize {
    100
}

fn default_unknowns() -> Vec<String> {
    vec!["q".into()]
}

fn one() -> f64 {
    1.0
}

fn default_population() -> i64 {
    seqid::models::dengue::YAP_POPULATION
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Validation series for water-tank e_RMS.
    #[serde(default)]
    pub validation: Option<PathBuf>,
    /// Generate the model's synthetic substitute series from this seed instead of reading a file.
    #[serde(default)]
    pub synthetic_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmId {
    Smc,
    TwistedSmc,
    Gradsearch,
    Pem,
    Psaem,
    Mh,
    Pmmh,
    Pg,
    Pgas,
}

impl AlgorithmId {
    pub fn is_chain(self) -> bool {
        matches!(self, AlgorithmId::Mh | AlgorithmId::Pmmh | AlgorithmId::Pg | AlgorithmId::Pgas)
    }

    pub fn default_iters(self) -> usize {
        match self {
            AlgorithmId::Smc | AlgorithmId::TwistedSmc => 1,
            AlgorithmId::Gradsearch => 100,
            AlgorithmId::Pem | AlgorithmId::Psaem => 50,
            AlgorithmId::Mh | AlgorithmId::Pmmh | AlgorithmId::Pg | AlgorithmId::Pgas => 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub id: AlgorithmId,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    /// Learner iterations or chain length; per-algorithm default when absent.
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub burn_in: Option<usize>,
    /// Starting values by parameter name.
    #[serde(default)]
    pub theta0: BTreeMap<String, f64>,
    /// Random-walk standard deviations on the unconstrained scale, one per free parameter.
    #[serde(default)]
    pub proposal_sd: Option<Vec<f64>>,
    #[serde(default)]
    pub adapt: bool,
    #[serde(default)]
    pub twist_mode: TwistMode,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "default_step_exponent")]
    pub step_exponent: f64,
    #[serde(default)]
    pub full_steps: usize,
    /// Random-walk scale for the tank k update in particle Gibbs; exact Gaussian update when absent.
    #[serde(default)]
    pub tank_k_rw_scale: Option<f64>,
}

fn default_particles() -> usize {
    100
}

fn default_step_exponent() -> f64 {
    0.7
}

impl AlgorithmConfig {
    pub fn iters(&self) -> usize {
        self.iters.unwrap_or_else(|| self.id.default_iters())
    }
}

/// Parse `text`, apply `key.path=value` overrides, then validate against the schema.
pub fn load(text: &str, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut table: toml::Table = text.parse().map_err(|e| Failure::config(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    ExperimentConfig::deserialize(toml::Value::Table(table)).map_err(|e| Failure::config(format!("config: {e}")))
}

pub fn load_path(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    load(&text, overrides)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override {spec:?} is not key=value")))?;
    // bare words that are not TOML values are taken as strings
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
seed = 3
[model]
id = "lgss-demo"
[algorithm]
id = "smc"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = load(DEMO, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.algorithm.n_particles, 100);
        assert_eq!(c.model, ModelConfig::LgssDemo { length: 100, unknowns: vec!["q".into()] });
        assert_eq!(c.algorithm.iters(), 1);
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let c = load(DEMO, &["algorithm.n_particles=7".into(), "seed=9".into(), "name=demo".into()]).unwrap();
        assert_eq!(c.algorithm.n_particles, 7);
        assert_eq!(c.seed, 9);
        assert_eq!(c.name.as_deref(), Some("demo"));
        let c = load(DEMO, &["algorithm.theta0.q=0.25".into()]).unwrap();
        assert_eq!(c.algorithm.theta0["q"], 0.25);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load(DEMO, &["algorithm.n_particle=7".into()]).is_err());
        assert!(load(DEMO, &["model.colour=1".into()]).is_err());
        assert!(load(DEMO, &["bogus".into()]).is_err());
        assert!(load("[model]\nid = \"nope\"\n[algorithm]\nid = \"smc\"\n", &[]).is_err());
    }

    #[test]
    fn priors_parse() {
        let text = format!("{DEMO}\n[prior.q]\ndist = \"inverse-gamma\"\nshape = 2.0\nscale = 1.0\n");
        let c = load(&text, &[]).unwrap();
        assert_eq!(c.prior["q"], PriorDist::InverseGamma { shape: 2.0, scale: 1.0 });
    }
}
