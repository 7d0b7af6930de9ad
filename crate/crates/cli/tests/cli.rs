use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqid::io::write_tank_series;
use seqid::models::dengue::{synthetic_reports, write_reports};
use seqid::models::watertank::{synthetic_tank_data, THETA_HAT};
use seqid::RandomStream;
use serde_json::Value;

fn seqid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqid"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SEQID_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

const DEMO: &str = "seed = 1\n[model]\nid = \"lgss-demo\"\n[algorithm]\nid = \"smc\"\nn_particles = 100\n";

#[test]
fn rerun_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "demo.toml", DEMO);
    assert!(seqid(&["run", "demo.toml", "-o", "a"], tmp.path()).status.success());
    assert!(seqid(&["run", "demo.toml", "-o", "b"], tmp.path()).status.success());
    for f in ["summary.json", "diagnostics.jsonl", "filter_means.csv", "manifest.json", "config.toml"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let s = summary(&tmp.path().join("a"));
    let diff = (s["log_z"].as_f64().unwrap() - s["log_lik_kalman"].as_f64().unwrap()).abs();
    assert!(diff < 5.0, "log_z far from the Kalman value: {diff}");
}

#[test]
fn manifest_config_reruns_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "demo.toml", DEMO);
    let args = ["run", "demo.toml", "-o", "a", "--set", "algorithm.id=pmmh", "--set", "algorithm.iters=40", "--seed", "5"];
    assert!(seqid(&args, tmp.path()).status.success());
    assert!(seqid(&["run", "a/config.toml", "-o", "b"], tmp.path()).status.success());
    let a = std::fs::read(tmp.path().join("a/chain.jsonl")).unwrap();
    let b = std::fs::read(tmp.path().join("b/chain.jsonl")).unwrap();
    assert_eq!(a, b);
    let m: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["algorithm"]["id"], "pmmh");
}

#[test]
fn pgas_on_dengue_is_incompatible() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "d.toml",
        "[model]\nid = \"dengue\"\n[data]\nsynthetic_seed = 3\n[algorithm]\nid = \"pgas\"\n",
    );
    let o = seqid(&["run", "d.toml", "-o", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("transition density unavailable"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn degeneracy_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "d.toml",
        "seed = 11\n[model]\nid = \"dengue\"\n[data]\nsynthetic_seed = 3\n[algorithm]\nid = \"smc\"\nn_particles = 2\n",
    );
    let o = seqid(&["run", "d.toml", "-o", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("degenerate at step"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "demo.toml", DEMO);
    assert!(seqid(&["run", "demo.toml", "-o", "a"], tmp.path()).status.success());
    let o = seqid(&["run", "demo.toml", "-o", "a"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    assert!(seqid(&["run", "demo.toml", "-o", "a", "--force"], tmp.path()).status.success());
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "demo.toml", &format!("name = \"demo\"\n{DEMO}"));
    let o = Command::new(env!("CARGO_BIN_EXE_seqid"))
        .args(["run", "demo.toml"])
        .current_dir(tmp.path())
        .env("SEQID_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("root/demo/summary.json").exists());
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "demo.toml", DEMO);
    let o = seqid(&["run", "demo.toml", "-o", "a", "--set", "algorithm.particles=3"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));
    let o = seqid(&["run", "missing.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = seqid(&["run", "demo.toml", "-o", "b", "--chains", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = seqid(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn chains_fan_out_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "demo.toml", DEMO);
    let args = |out: &'static str| ["run", "demo.toml", "-o", out, "--set", "algorithm.id=mh", "--set", "algorithm.iters=500", "--chains", "3"];
    assert!(seqid(&args("a"), tmp.path()).status.success());
    assert!(seqid(&args("b"), tmp.path()).status.success());
    for i in 0..3 {
        let f = format!("chain-{i}.jsonl");
        assert_eq!(std::fs::read(tmp.path().join("a").join(&f)).unwrap(), std::fs::read(tmp.path().join("b").join(&f)).unwrap());
    }
    assert_ne!(
        std::fs::read(tmp.path().join("a/chain-0.jsonl")).unwrap(),
        std::fs::read(tmp.path().join("a/chain-1.jsonl")).unwrap()
    );
    let s = summary(&tmp.path().join("a"));
    assert_eq!(s["chains"], 3);

    let o = seqid(&["summarize", "a/chain-0.jsonl", "a/chain-1.jsonl", "a/chain-2.jsonl", "--burn-in", "50", "--json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows[0]["name"], "q");
    let posterior = std::fs::read_to_string(tmp.path().join("a/posterior.csv")).unwrap();
    assert!(posterior.starts_with("name,mean,sd,q025,q25,median,q75,q975,iact,ess\nq,"));
}

#[test]
fn validate_reports_lengths_and_totals() {
    let tmp = tempfile::tempdir().unwrap();
    let (est, _) = synthetic_tank_data(1024, &THETA_HAT, &mut RandomStream::new(7, 0)).unwrap();
    let mut buf = Vec::new();
    write_tank_series(&est, &mut buf).unwrap();
    std::fs::write(tmp.path().join("tank.csv"), buf).unwrap();
    let o = seqid(&["validate", "--model", "watertank", "tank.csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["census"]["length"], 1024);
    assert_eq!(r["census"]["missing"], 0);

    let reports = synthetic_reports(978, 3).unwrap();
    let mut buf = Vec::new();
    write_reports(&reports, &mut buf).unwrap();
    std::fs::write(tmp.path().join("yap.csv"), buf).unwrap();
    let o = seqid(&["validate", "--model", "dengue", "yap.csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["observations"], 197);
    assert_eq!(r["total_cases"], 978);
    assert_eq!(r["census"]["observed"], 197);

    write(tmp.path(), "empty.csv", "");
    for model in ["watertank", "dengue", "lgss"] {
        let o = seqid(&["validate", "--model", model, "empty.csv"], tmp.path());
        assert_eq!(o.status.code(), Some(1), "{model}");
    }
    write(tmp.path(), "bad.csv", "u,y\n1,2\n3,x\n");
    let o = seqid(&["validate", "--model", "watertank", "bad.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 2, column y"), "{}", stderr(&o));
}

#[test]
fn watertank_learner_reports_simulation_error() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "t.toml",
        "[model]\nid = \"watertank\"\n[data]\nsynthetic_seed = 2024\n[algorithm]\nid = \"psaem\"\nn_particles = 20\niters = 5\n",
    );
    let o = seqid(&["run", "t.toml", "-o", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&tmp.path().join("out"));
    assert!(s["e_rms"]["validation"].as_f64().unwrap() > 0.0);
    let trace = std::fs::read_to_string(tmp.path().join("out/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    assert!(trace.starts_with("iter,k1,k2,k3,k4,k5,k6,sigma_v2,sigma_e2,log_z,step,accepted\n"));
}

#[test]
fn dengue_desk_scale_rho_median() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = synthetic_reports(978, 3).unwrap();
    let mut buf = Vec::new();
    write_reports(&reports, &mut buf).unwrap();
    std::fs::write(tmp.path().join("yap.csv"), buf).unwrap();
    write(
        tmp.path(),
        "d.toml",
        "seed = 11\n[model]\nid = \"dengue\"\n[data]\npath = \"yap.csv\"\n[algorithm]\nid = \"pg\"\nn_particles = 256\niters = 1000\n",
    );
    let o = seqid(&["run", "d.toml", "-o", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&tmp.path().join("out"));
    let rho = s["posterior"].as_array().unwrap().iter().find(|r| r["name"] == "rho").unwrap();
    let median = rho["median"].as_f64().unwrap();
    assert!((0.2..=0.5).contains(&median), "rho median {median}");
    let m: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn watertank_initial_law_is_configurable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[model]\nid = \"watertank\"\ninitial = [5.0, 4.0]\ninitial_var = [0.1, 0.1]\n[data]\nsynthetic_seed = 2024\n[algorithm]\nid = \"twisted-smc\"\nn_particles = 20\n";
    write(tmp.path(), "t.toml", cfg);
    let o = seqid(&["run", "t.toml", "-o", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(summary(&tmp.path().join("out"))["log_z"].as_f64().unwrap().is_finite());
    let o = seqid(&["run", "t.toml", "-o", "bad", "--set", "model.initial_var=[0.1, 0.0]"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}
