use hoope_core::batchopt::ClimatologyPrior;
use hoope_core::harness::{self, ExperimentConfig, MetricsRow, Preset, Seeds, Variant};
use hoope_core::surrogate::GpModel;
use hoope_core::synth;
use proptest::prelude::*;

const SEEDS: Seeds = Seeds {
    nature: 21,
    obs: 22,
    init: 23,
    mcmc: 24,
};

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(Preset::Desk, SEEDS);
    c.run_length_mtu = 6.0;
    c.spinup_mtu = 2.0;
    c.model_spinup_mtu = 2.0;
    c.ensemble_size = 10;
    c.offline.n_members = 10;
    c.offline.run_mtu = 6.0;
    c.offline.index.window_mtu = 4.0;
    c.offline.bootstrap_subset_mtu = 2.0;
    c.offline.bootstrap_samples = 50;
    c.offline.mcmc_iterations = 5000;
    c.offline.mcmc_burnin = 1000;
    c
}

#[test]
fn reloaded_files_reproduce_the_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let nature = harness::generate_nature(&cfg).unwrap();
    let obs = harness::generate_observations(&cfg, &nature).unwrap();
    let off = harness::run_offline(&cfg, &obs).unwrap();

    let p = |f: &str| dir.path().join(f);
    synth::write_nature_csv(&nature, &p("nature.csv")).unwrap();
    synth::write_observations_csv(&obs, &p("obs.csv")).unwrap();
    off.prior.save(&p("prior.txt")).unwrap();
    off.surrogate.save(&p("gp.txt")).unwrap();
    let nature2 = synth::read_nature_csv(&p("nature.csv")).unwrap();
    let obs2 = synth::read_observations_csv(&p("obs.csv")).unwrap();
    let prior2 = ClimatologyPrior::load(&p("prior.txt")).unwrap();
    let gp2 = GpModel::load(&p("gp.txt")).unwrap();

    for t in [0.0, 7.3, 11.5, 29.9] {
        assert_eq!(off.surrogate.predict(t).unwrap(), gp2.predict(t).unwrap());
    }
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.variant = v;
        let a = harness::run_assimilation(&c, &nature, &obs, Some(&off.prior)).unwrap();
        let b = harness::run_assimilation(&c, &nature2, &obs2, Some(&prior2)).unwrap();
        let (ra, rb) = (MetricsRow::new(&c, &a.metrics), MetricsRow::new(&c, &b.metrics));
        assert!(ra.same_bits(&rb), "{v}");
        assert_eq!(a.params, b.params);
        rows.push(ra);
        harness::write_param_timeseries_csv(&a, &nature, &p(&format!("ts_{v}.csv"))).unwrap();
    }
    harness::write_metrics_csv(&rows, &p("metrics.csv")).unwrap();
    let back = harness::read_metrics_csv(&p("metrics.csv")).unwrap();
    harness::write_metrics_csv(&back, &p("metrics2.csv")).unwrap();
    assert_eq!(std::fs::read(p("metrics.csv")).unwrap(), std::fs::read(p("metrics2.csv")).unwrap());

    let ts = std::fs::read_to_string(p("ts_rtc.csv")).unwrap();
    let first = ts.lines().nth(1).unwrap();
    assert!(first.starts_with("0.05,1,"), "{first}");
}

#[test]
fn offline_stage_failures_are_tagged() {
    let cfg = small();
    let nature = harness::generate_nature(&cfg).unwrap();
    let mut obs = harness::generate_observations(&cfg, &nature).unwrap();
    // a flat observation record has no autocorrelation
    for b in &mut obs {
        for e in &mut b.entries {
            e.value = 1.0;
        }
    }
    let err = harness::run_offline(&cfg, &obs).unwrap_err().to_string();
    assert!(err.contains("observed index"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn metrics_stay_in_range(
        a in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..20),
        shift in -5.0f64..5.0,
        scale in -3.0f64..3.0,
    ) {
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| scale * v + shift + 0.1 * v.sin()).collect()).collect();
        let (rmse, r) = harness::rmse_and_correlation(&a, &b).unwrap();
        prop_assert!(rmse >= 0.0);
        prop_assert!(r.is_nan() || (-1.0..=1.0).contains(&r));
        // correlation is unchanged by an affine map of the estimate
        let c: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| 2.0 * v + 7.0).collect()).collect();
        let (_, r2) = harness::rmse_and_correlation(&c, &b).unwrap();
        prop_assert!((r.is_nan() && r2.is_nan()) || (r - r2).abs() < 1e-9);
    }
}

/// Full-length offline calibration against the desk-scale one; about ten
/// minutes on one core.
#[test]
#[ignore]
fn desk_prior_agrees_with_full_length_prior() {
    let desk = ExperimentConfig::preset(Preset::Desk, SEEDS);
    let paper = ExperimentConfig::preset(Preset::Paper, SEEDS);
    let prior = |c: &ExperimentConfig| {
        let nature = harness::generate_nature(c).unwrap();
        let obs = harness::generate_observations(c, &nature).unwrap();
        harness::run_offline(c, &obs).unwrap().prior
    };
    let (d, p) = (prior(&desk), prior(&paper));
    let sd = p.c_diag[0].sqrt();
    assert!((d.theta_c[0] - p.theta_c[0]).abs() <= 2.0 * sd, "desk {:?} paper {:?}", d, p);
}
