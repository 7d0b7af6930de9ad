use super::*;
use crate::gaussian::{ekf_twisting, kalman_filter, kalman_loglik, LgssSpec, TwistedProposal};
use crate::models::{Dengue, FiniteHmm, Lgss};
use proptest::prelude::*;

fn lgss_data(t: usize, seed: u64) -> (Lgss, Dataset) {
    let m = Lgss::scalar(0.9, 1.0, 0.5, 0.8, 0.0, 1.0, &[]).unwrap();
    let mut rng = RandomStream::new(seed, 99);
    let (_, d) = crate::model::simulate(&m, &vec![Vec::new(); t], &[], &mut rng).unwrap();
    (m, d)
}

fn with_gaps(d: &Dataset, every: usize) -> Dataset {
    let obs = d
        .observations()
        .iter()
        .enumerate()
        .map(|(t, y)| if t % every == 1 { None } else { y.clone() })
        .collect();
    Dataset::new(d.inputs().to_vec(), obs).unwrap()
}

#[test]
fn flat_likelihood_keeps_uniform_weights() {
    let m = FiniteHmm::new(
        vec![0.5, 0.5],
        vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        vec![vec![0.3, 0.7], vec![0.3, 0.7]],
    )
    .unwrap();
    let data = Dataset::from_observations(vec![Some(vec![1.0]), Some(vec![0.0]), Some(vec![1.0])]).unwrap();
    let out = smc_run(&m, &data, &[], &Bootstrap, None, &SmcConfig::new(7), &mut RandomStream::new(1, 0)).unwrap();
    for w in &out.ensemble.norm_weights {
        assert!((w - 1.0 / 7.0).abs() < 1e-15);
    }
    let exact = 0.7f64.ln() + 0.3f64.ln() + 0.7f64.ln();
    assert!((out.log_z() - exact).abs() < 1e-12);
}

#[test]
fn neutral_twist_changes_nothing_when_fully_observed() {
    let (m, d) = lgss_data(20, 3);
    let cfg = SmcConfig::new(50);
    let a = smc_run(&m, &d, &[], &Bootstrap, None, &cfg, &mut RandomStream::new(5, 0)).unwrap();
    let b = smc_run(&m, &d, &[], &Bootstrap, Some(&NoTwist), &cfg, &mut RandomStream::new(5, 0)).unwrap();
    assert_eq!(a.log_z().to_bits(), b.log_z().to_bits());
    assert_eq!(a.ensemble.particles, b.ensemble.particles);
}

#[test]
fn single_step_log_z_is_log_mean_likelihood() {
    let (m, d) = lgss_data(1, 4);
    let out = smc_run(&m, &d, &[], &Bootstrap, None, &SmcConfig::new(64), &mut RandomStream::new(6, 0)).unwrap();
    let y = d.observation(0).unwrap();
    let lik: Vec<f64> = out
        .ensemble
        .particles
        .iter()
        .map(|x| m.observation_logpdf(y, x, &[], 0, &[]))
        .collect();
    let oracle = logsumexp(&lik) - 64f64.ln();
    assert!((out.log_z() - oracle).abs() < 1e-12);
}

#[test]
fn degenerate_weights_report_the_step() {
    let m = Lgss::scalar(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, &[]).unwrap();
    let d = Dataset::scalar(&[0.0; 3], &[0.0, 0.0, 1.0]).unwrap();
    let err = smc_run(&m, &d, &[], &Bootstrap, None, &SmcConfig::new(4), &mut RandomStream::new(1, 0)).unwrap_err();
    assert!(matches!(err, Error::Degeneracy { step: 2 }), "{err:?}");
}

#[test]
fn too_few_particles_is_input_error() {
    let (m, d) = lgss_data(5, 1);
    let r = smc_run(&m, &d, &[], &Bootstrap, None, &SmcConfig::new(1), &mut RandomStream::new(1, 0));
    assert!(matches!(r, Err(Error::Input(_))));
    let r = csmc_run(&m, &d, &[], &vec![vec![0.0]; 5], 1, false, &mut RandomStream::new(1, 0));
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn non_bootstrap_needs_transition_density() {
    struct Dummy;
    impl Proposal<Dengue> for Dummy {
        fn tag(&self) -> ProposalTag {
            ProposalTag::Custom
        }
        fn sample_initial(&self, m: &Dengue, th: &[f64], rng: &mut RandomStream) -> crate::models::SeirState {
            m.sample_initial(th, rng)
        }
        fn initial_logpdf(&self, _: &Dengue, _: &crate::models::SeirState, _: &[f64]) -> f64 {
            0.0
        }
        fn sample(
            &self,
            m: &Dengue,
            x: &crate::models::SeirState,
            u: &[f64],
            t: usize,
            th: &[f64],
            rng: &mut RandomStream,
        ) -> crate::models::SeirState {
            m.sample_transition(x, u, t, th, rng)
        }
        fn logpdf(
            &self,
            _: &Dengue,
            _: &crate::models::SeirState,
            _: &crate::models::SeirState,
            _: &[f64],
            _: usize,
            _: &[f64],
        ) -> f64 {
            0.0
        }
    }
    let d = Dataset::from_observations(vec![Some(vec![0.0]); 3]).unwrap();
    let m = Dengue::for_data(&d, 100).unwrap();
    let th = [0.1, 0.2, 0.2, 0.1, 0.1, 0.0, 0.3];
    let r = smc_run(&m, &d, &th, &Dummy, None, &SmcConfig::new(4), &mut RandomStream::new(1, 0));
    assert!(matches!(r, Err(Error::Capability(_))));
    let r = csmc_run(&m, &d, &th, &[], 4, true, &mut RandomStream::new(1, 0));
    assert!(r.is_err());
}

#[test]
fn unobserved_steps_do_not_resample() {
    let (m, d) = lgss_data(12, 7);
    let d = with_gaps(&d, 3);
    let out = smc_run(&m, &d, &[], &Bootstrap, None, &SmcConfig::new(30), &mut RandomStream::new(2, 0)).unwrap();
    for t in 1..d.len() {
        // resampling happens at t iff something reweighted the particles since the last one
        assert_eq!(out.diagnostics[t].resampled, d.is_observed(t - 1), "step {t}");
    }
    for t in 0..d.len() {
        if !d.is_observed(t) {
            assert_eq!(out.diagnostics[t].log_z_increment, 0.0);
        }
    }
}

#[test]
fn same_seed_same_output_and_stream_map_permutes() {
    let (m, d) = lgss_data(15, 8);
    let cfg = SmcConfig::new(10).with_history();
    let a = smc_run(&m, &d, &[], &Bootstrap, None, &cfg, &mut RandomStream::new(9, 1)).unwrap();
    let b = smc_run(&m, &d, &[], &Bootstrap, None, &cfg, &mut RandomStream::new(9, 1)).unwrap();
    assert_eq!(a.log_z().to_bits(), b.log_z().to_bits());
    let c = smc_run(&m, &d, &[], &Bootstrap, None, &cfg, &mut RandomStream::new(10, 1)).unwrap();
    assert_ne!(a.log_z().to_bits(), c.log_z().to_bits());
    let rev: Vec<u64> = (0..10).rev().collect();
    let mut cfg_rev = cfg.clone();
    cfg_rev.stream_map = Some(rev);
    let e = smc_run(&m, &d, &[], &Bootstrap, None, &cfg_rev, &mut RandomStream::new(9, 1)).unwrap();
    let h0 = &a.history.as_ref().unwrap().particles[0];
    let h1 = &e.history.as_ref().unwrap().particles[0];
    for i in 0..10 {
        assert_eq!(h0[i], h1[9 - i]);
    }
}

#[test]
fn bootstrap_unbiased_on_finite_hmm() {
    let mut rng = RandomStream::new(11, 0);
    let m = FiniteHmm::random(3, 3, &mut rng).unwrap();
    let data = Dataset::from_observations(vec![
        Some(vec![0.0]),
        Some(vec![2.0]),
        None,
        Some(vec![1.0]),
        Some(vec![1.0]),
    ])
    .unwrap();
    let exact = m.log_likelihood(&data).unwrap().exp();
    let ratios: Vec<f64> = (0..4000)
        .map(|s| {
            let out = smc_run(&m, &data, &[], &Bootstrap, None, &SmcConfig::new(5), &mut RandomStream::new(s, 3)).unwrap();
            out.log_z().exp() / exact
        })
        .collect();
    let mean = crate::stats::mean(&ratios);
    let se = crate::stats::std_dev(&ratios) / (ratios.len() as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.5 * se, "mean {mean} se {se}");
}

#[test]
fn multinomial_and_ess_threshold_paths_agree_in_mean() {
    let (m, d) = lgss_data(10, 12);
    let exact = kalman_loglik(m.spec(), &d).unwrap();
    for cfg in [
        SmcConfig::new(200).with_resampling(ResamplingScheme::Multinomial),
        SmcConfig::new(200).with_ess_threshold(0.5),
    ] {
        let v: Vec<f64> = (0..40)
            .map(|s| smc_run(&m, &d, &[], &Bootstrap, None, &cfg, &mut RandomStream::new(s, 4)).unwrap().log_z())
            .collect();
        assert!((crate::stats::mean(&v) - exact).abs() < 0.1);
    }
}

#[test]
fn twisted_lgss_is_exact_with_gaps_and_vectors() {
    let (m, d) = lgss_data(30, 13);
    for data in [d.clone(), with_gaps(&d, 4)] {
        let exact = kalman_loglik(m.spec(), &data).unwrap();
        let tables = ekf_twisting(&m, &data, &[]).unwrap();
        assert!((tables.log_norm - exact).abs() < 1e-9);
        let prop = TwistedProposal::new(&m, &tables, &[]).unwrap();
        for n in [5, 50] {
            let out = smc_run(&m, &data, &[], &prop, Some(&tables), &SmcConfig::new(n), &mut RandomStream::new(n as u64, 0)).unwrap();
            assert!((out.log_z() - exact).abs() < 1e-6, "N={n}: {} vs {exact}", out.log_z());
        }
    }
    let spec = LgssSpec::<f64> {
        a: nalgebra::DMatrix::from_row_slice(2, 2, &[0.8, 0.2, -0.1, 0.7]),
        b: nalgebra::DMatrix::zeros(2, 0),
        c: nalgebra::DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        d: nalgebra::DMatrix::zeros(1, 0),
        q: nalgebra::DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.4]),
        r: nalgebra::DMatrix::from_row_slice(1, 1, &[0.2]),
        mu1: nalgebra::DVector::from_column_slice(&[0.5, -0.5]),
        sigma1: nalgebra::DMatrix::identity(2, 2),
    };
    let m2 = Lgss::new(spec).unwrap();
    let (_, d2) = crate::model::simulate(&m2, &vec![Vec::new(); 20], &[], &mut RandomStream::new(2, 2)).unwrap();
    let exact = kalman_loglik(m2.spec(), &d2).unwrap();
    let tables = ekf_twisting(&m2, &d2, &[]).unwrap();
    let prop = TwistedProposal::new(&m2, &tables, &[]).unwrap();
    let out = smc_run(&m2, &d2, &[], &prop, Some(&tables), &SmcConfig::new(5), &mut RandomStream::new(1, 0)).unwrap();
    assert!((out.log_z() - exact).abs() < 1e-6);
}

#[test]
fn weights_only_twisting_is_unbiased() {
    let (m, d) = lgss_data(15, 14);
    let exact = kalman_loglik(m.spec(), &d).unwrap();
    let tables = ekf_twisting(&m, &d, &[]).unwrap();
    let ratios: Vec<f64> = (0..2000)
        .map(|s| {
            let out = smc_run(&m, &d, &[], &Bootstrap, Some(&tables), &SmcConfig::new(10), &mut RandomStream::new(s, 5)).unwrap();
            (out.log_z() - exact).exp()
        })
        .collect();
    let mean = crate::stats::mean(&ratios);
    let se = crate::stats::std_dev(&ratios) / (ratios.len() as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.5 * se, "mean {mean} se {se}");
}

#[test]
fn bootstrap_filter_tracks_kalman_means() {
    let (m, d) = lgss_data(40, 15);
    let kf = kalman_filter(m.spec(), &d).unwrap();
    let pf = bootstrap_pf(&m, &d, &[], 20_000, &mut RandomStream::new(3, 3)).unwrap();
    for t in 0..40 {
        let sd = kf.filtered[t].cov[(0, 0)].sqrt();
        assert!((pf.means[t][0] - kf.filtered[t].mean[0]).abs() < 0.1 * sd, "t={t} {} {} {sd} ess {}", pf.means[t][0], kf.filtered[t].mean[0], pf.diagnostics[t].ess);
    }
}

#[test]
fn conditional_smc_keeps_reference() {
    let (m, d) = lgss_data(10, 16);
    let reference: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64 * 0.1]).collect();
    for as_ in [false, true] {
        let out = csmc_run(&m, &d, &[], &reference, 6, as_, &mut RandomStream::new(1, 0)).unwrap();
        for t in 0..10 {
            assert_eq!(out.history.particles[t][5], reference[t]);
        }
        if !as_ {
            for t in 1..10 {
                assert_eq!(out.history.ancestors[t][5], 5);
            }
        }
        assert_eq!(out.trajectory.len(), 10);
        let s: f64 = out.final_weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let short = csmc_run(&m, &d, &[], &reference[..9], 6, false, &mut RandomStream::new(1, 0));
    assert!(matches!(short, Err(Error::Input(_))));
}

#[test]
fn diagnostics_serialize_as_json_lines() {
    let (m, d) = lgss_data(4, 17);
    let out = smc_run(&m, &d, &[], &Bootstrap, None, &SmcConfig::new(8), &mut RandomStream::new(1, 0)).unwrap();
    let mut buf = Vec::new();
    write_diagnostics_jsonl(&out.diagnostics, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<StepDiagnostics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, out.diagnostics);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_normalized_and_log_z_consistent(seed in 0u64..1000, n in 2usize..40) {
        let (m, d) = lgss_data(8, seed);
        let out = smc_run(&m, &d, &[], &Bootstrap, None, &SmcConfig::new(n), &mut RandomStream::new(seed, 7)).unwrap();
        let s: f64 = out.ensemble.norm_weights.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(out.ensemble.norm_weights.iter().all(|&w| w >= 0.0));
        let incs: f64 = out.diagnostics.iter().map(|x| x.log_z_increment).sum();
        prop_assert!((incs - out.log_z()).abs() < 1e-9);
        prop_assert!(out.log_z().is_finite());
        prop_assert_eq!(out.ensemble.ancestors.len(), 8);
    }
}
