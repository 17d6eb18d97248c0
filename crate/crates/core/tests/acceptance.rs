//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so the
//! lines are always printed; exits non-zero if any criterion fails.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hoope_core::batchopt::{self, ClimatologyPrior, ParameterPrior};
use hoope_core::enkf::{self, AnalyzeOptions, AugmentedEnsemble, Inflation, LocalizationConfig};
use hoope_core::harness::{self, ExperimentConfig, MetricsRow, OfflineResult, Preset, Seeds, Variant};
use hoope_core::hoope::{self, BackgroundBlocks};
use hoope_core::linalg::rel_diff;
use hoope_core::models::{self, ModelConstants, TwoScaleState};
use hoope_core::synth::{NatureRun, ObsEntry, ObsKind, ObservationBatch};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = f();
    let el = t.elapsed();
    let in_time = limit.is_none_or(|l| el <= l);
    let pass = out.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / limit {:.0}s", l.as_secs_f64()));
    println!(
        "{} criterion {id} {name}: {} [{:.2}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        el.as_secs_f64()
    );
    pass
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

fn appendix_a_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let nx = rng.random_range(1..=8);
        let np = rng.random_range(1..=4);
        let full = random_spd(&mut rng, nx + np);
        let bx = full.view((0, 0), (nx, nx)).into_owned();
        let bxt = full.view((0, nx), (nx, np)).into_owned();
        let bt = full.view((nx, nx), (np, np)).into_owned();
        let xm = DVector::from_fn(nx, |_, _| rng.random_range(-5.0..5.0));
        let tm = DVector::from_fn(np, |_, _| rng.random_range(5.0..15.0));
        let tc = DVector::from_fn(np, |_, _| rng.random_range(5.0..15.0));
        let c = random_spd(&mut rng, np);
        let bg = BackgroundBlocks {
            bx: &bx,
            bx_theta: &bxt,
            b_theta: &bt,
            x_mean: &xm,
            theta_mean: &tm,
        };
        let exact = hoope::combine_background_climatology_exact(bg, &tc, &c).unwrap();
        let oracle = hoope::combine_delta_limit_oracle(bg, &tc, &c, 1e8).unwrap();
        for e in [
            rel_diff(&exact.x_mean, &oracle.x_mean),
            rel_diff(&exact.theta_mean, &oracle.theta_mean),
            rel_diff(&exact.bx, &oracle.bx),
            rel_diff(&exact.bx_theta, &oracle.bx_theta),
            rel_diff(&exact.b_theta, &oracle.b_theta),
        ] {
            worst = worst.max(e);
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("100 systems, worst relative difference {worst:.2e} (tol 1e-6)"),
    }
}

/// Gain-form Kalman update on the ensemble sample covariance.
fn gain_form_kf(members: &DMatrix<f64>, rows: &[usize], values: &[f64], var: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = members.nrows();
    let k = members.ncols() as f64;
    let mean = members.column_mean();
    let mut xp = members.clone();
    for mut c in xp.column_iter_mut() {
        c -= &mean;
    }
    let b = &xp * xp.transpose() / (k - 1.0);
    let h = DMatrix::from_fn(rows.len(), n, |i, j| if rows[i] == j { 1.0 } else { 0.0 });
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(var));
    let s = &h * &b * h.transpose() + r;
    let gain = &b * h.transpose() * s.try_inverse().unwrap();
    let d = DVector::from_column_slice(values) - &h * &mean;
    let xa = &mean + &gain * d;
    let pa = (DMatrix::identity(n, n) - &gain * &h) * &b;
    (xa, pa)
}

fn sample_cov(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut xp = m.clone();
    for mut c in xp.column_iter_mut() {
        c -= &mean;
    }
    &xp * xp.transpose() / (m.ncols() as f64 - 1.0)
}

fn letkf_matches_kalman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n_x in 1..=3 {
        let n = 2 * n_x;
        for k in [n + 2, n + 5, 3 * n] {
            for partial in [false, true] {
                let members = DMatrix::from_fn(n, k, |i, _| {
                    if i < n_x {
                        rng.random_range(-3.0..3.0)
                    } else {
                        8.0 + rng.random_range(-2.0..2.0)
                    }
                });
                let grids: Vec<usize> = if partial && n_x > 1 { (0..n_x - 1).collect() } else { (0..n_x).collect() };
                let entries: Vec<ObsEntry> = grids
                    .iter()
                    .map(|&g| ObsEntry {
                        location: g,
                        value: rng.random_range(-3.0..3.0),
                        error_variance: rng.random_range(0.05..1.0),
                        kind: ObsKind::State,
                    })
                    .collect();
                let batch = ObservationBatch { time: 0.0, entries: entries.clone() };
                let ens = AugmentedEnsemble::new(n_x, members.clone()).unwrap();
                let mut infl = Inflation::Fixed { rho_x: 1.0, rho_theta: 1.0 };
                let out = enkf::analyze(&ens, &batch, &LocalizationConfig::global(), &mut infl, AnalyzeOptions::default())
                    .unwrap();
                let values: Vec<f64> = entries.iter().map(|e| e.value).collect();
                let var: Vec<f64> = entries.iter().map(|e| e.error_variance).collect();
                let (xa, pa) = gain_form_kf(&members, &grids, &values, &var);
                worst = worst
                    .max(rel_diff(&out.members().column_mean(), &xa))
                    .max(rel_diff(&sample_cov(out.members()), &pa));
                cases += 1;
            }
        }
    }
    Outcome {
        pass: worst <= 1e-8,
        detail: format!("{cases} systems, worst relative difference {worst:.2e} (tol 1e-8)"),
    }
}

fn hoope_limits() -> Outcome {
    let c = ModelConstants::default();
    let n = c.n_x;
    let k = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let states: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-4.0..8.0)).collect()).collect();
    let params: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(8.0..15.0)).collect()).collect();
    let mut ens = AugmentedEnsemble::from_parts(&states, &params).unwrap();
    // one full cycle: forecast, then analysis
    let mut rk = models::Rk4::new(n);
    for i in 0..k {
        let mut x = ens.member_state(i);
        models::integrate_single_scale(&mut x, &ens.member_params(i), c.dt, c.steps_for(0.05), &mut rk);
        ens.set_member_state(i, &x);
    }
    let batch = ObservationBatch {
        time: 0.05,
        entries: [0usize, 1, 4, 5]
            .iter()
            .map(|&g| ObsEntry {
                location: g,
                value: ens.state_mean()[g] + rng.random_range(-1.0..1.0),
                error_variance: 0.01,
                kind: ObsKind::State,
            })
            .collect(),
    };
    let loc = LocalizationConfig::default();
    let fixed = || Inflation::Fixed { rho_x: 1.1, rho_theta: 1.5 };
    let plain = enkf::analyze(&ens, &batch, &loc, &mut fixed(), AnalyzeOptions::default()).unwrap();
    let wide = ClimatologyPrior::broadcast(11.0, 1e12, n).unwrap();
    let pso = enkf::analyze(&ens, &hoope::pso_augment(&batch, &wide), &loc, &mut fixed(), AnalyzeOptions::default()).unwrap();
    let a = rel_diff(pso.members(), plain.members());

    let prior = ClimatologyPrior::broadcast(11.5, 0.64, n).unwrap();
    let theta = ens.members().rows(n, n).into_owned();
    let t = hoope::rtc_transform(&theta, &prior, &vec![1e12; n]).unwrap();
    let moved = t.members();
    let mut b = 0.0f64;
    for r in 0..n {
        let row: Vec<f64> = moved.row(r).iter().copied().collect();
        let m = row.iter().sum::<f64>() / k as f64;
        let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k as f64 - 1.0)).sqrt();
        b = b.max((m - 11.5).abs() / 11.5).max((sd - 0.8).abs() / 0.8);
    }

    let flat = ClimatologyPrior::broadcast(11.5, 1e12, n).unwrap();
    let same = hoope::rtc_transform(&theta, &flat, &vec![1.0; n]).unwrap();
    let cc = rel_diff(&same.members(), &theta);
    Outcome {
        pass: a <= 1e-5 && b <= 1e-4 && cc <= 1e-6,
        detail: format!("(a) PSO C=1e12 vs plain {a:.2e} (tol 1e-5); (b) RTC rho=1e12 {b:.2e} (tol 1e-4); (c) RTC sigma_c=1e12 identity {cc:.2e} (tol 1e-6)"),
    }
}

fn scalar_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = 10;
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..20.0) * rng.random_range(0.1..2.0)).collect();
        let m = theta.iter().sum::<f64>() / k as f64;
        let sb2 = theta.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k as f64 - 1.0);
        let sc2 = 10f64.powf(rng.random_range(-2.0..2.0));
        let rho = rng.random_range(1.0..20.0);
        let prior = ClimatologyPrior::broadcast(rng.random_range(5.0..15.0), sc2, 1).unwrap();
        let t = hoope::rtc_transform(&DMatrix::from_row_slice(1, k, &theta), &prior, &[rho]).unwrap();
        let p = &t.new_perturbations;
        let var = p.iter().map(|v| v * v).sum::<f64>() / (k as f64 - 1.0);
        let precision = 1.0 / sc2 + 1.0 / (rho * sb2);
        worst = worst.max(((1.0 / var) - precision).abs() / precision);
        let eff = hoope::effective_inflation(rho, sc2, sb2);
        let want = rho * sc2 / (sc2 + rho * sb2);
        worst = worst.max((eff - want).abs() / want).max((var / sb2 - want).abs() / want);
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("1000 cases, worst relative error {worst:.2e} (tol 1e-12)"),
    }
}

fn mcmc_gaussian() -> Outcome {
    let bounds = ParameterPrior::new(-10.0, 30.0).unwrap();
    let chain = batchopt::mh_sample(
        |t| Ok((t - 10.0).powi(2) / 8.0),
        &bounds,
        bounds.default_proposal_std(),
        batchopt::MCMC_ITERATIONS,
        batchopt::MCMC_BURNIN,
        505,
    )
    .unwrap();
    let fit = batchopt::fit_gaussian(&chain, 1).unwrap();
    let dm = (fit.theta_c[0] - 10.0).abs();
    let dv = (fit.c_diag[0] - 4.0).abs() / 4.0;
    Outcome {
        pass: dm <= 0.05 && dv <= 0.04,
        detail: format!(
            "mean {:.4} (|err| {dm:.4} <= 0.05), variance {:.4} (rel err {:.2}% <= 4%)",
            fit.theta_c[0],
            fit.c_diag[0],
            dv * 100.0
        ),
    }
}

fn rk4_order() -> Outcome {
    let base = ModelConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut s0 = TwoScaleState::zeros(&base);
    s0.x.iter_mut().for_each(|v| *v = rng.random_range(-5.0..10.0));
    s0.v.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    models::integrate_two_scale(&mut s0, &base, 2000);
    let run = |dt: f64| {
        let c = ModelConstants { dt, ..base };
        let mut s = s0.clone();
        models::integrate_two_scale(&mut s, &c, (1.0 / dt).round() as usize);
        s.to_packed()
    };
    let dt = 0.002;
    let reference = run(dt / 8.0);
    let err = |v: Vec<f64>| v.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ratio = err(run(dt)) / err(run(dt / 2.0));
    Outcome {
        pass: (12.0..=20.0).contains(&ratio),
        detail: format!("one-MTU error ratio dt={dt} vs dt/2 against dt/8: {ratio:.2} (in [12, 20])"),
    }
}

struct Desk {
    cfg: ExperimentConfig,
    nature: NatureRun,
    obs: Vec<ObservationBatch>,
    offline: OfflineResult,
}

fn desk() -> &'static Desk {
    static CELL: OnceLock<Desk> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::preset(
            Preset::Desk,
            Seeds {
                nature: 11,
                obs: 12,
                init: 13,
                mcmc: 14,
            },
        );
        let nature = harness::generate_nature(&cfg).unwrap();
        let obs = harness::generate_observations(&cfg, &nature).unwrap();
        let offline = harness::run_offline(&cfg, &obs).unwrap();
        println!(
            "  desk fixture: climatology N({:.4}, {:.4}), true F mean {:.4}",
            offline.prior.theta_c[0],
            offline.prior.c_diag[0],
            nature.f_true.iter().flatten().sum::<f64>() / (nature.len() * cfg.model.n_x) as f64
        );
        Desk {
            cfg,
            nature,
            obs,
            offline,
        }
    })
}

fn adaptive_runs() -> &'static Vec<MetricsRow> {
    static CELL: OnceLock<Vec<MetricsRow>> = OnceLock::new();
    CELL.get_or_init(|| {
        let d = desk();
        Variant::ALL
            .iter()
            .map(|&v| {
                let mut c = d.cfg.clone();
                c.variant = v;
                let out = harness::run_assimilation(&c, &d.nature, &d.obs, Some(&d.offline.prior)).unwrap();
                let row = MetricsRow::new(&c, &out.metrics);
                println!(
                    "  {:<8} rmse_x {:.4} r_x {:.4} rmse_F {:.4} r_F {:.4} diverged {}",
                    v.name(),
                    row.rmse_state,
                    row.r_state,
                    row.rmse_param,
                    row.r_param,
                    row.diverged
                );
                row
            })
            .collect()
    })
}

fn table1_ordering() -> Outcome {
    let rows = adaptive_runs();
    let (n, p, r) = (rows[0].rmse_param, rows[1].rmse_param, rows[2].rmse_param);
    let band = |v: f64| (1.5..=3.5).contains(&v);
    Outcome {
        pass: n > p && n > r && band(p) && band(r),
        detail: format!("rmse_param nohoope {n:.3} > pso {p:.3}, rtc {r:.3}; pso/rtc in [1.5, 3.5]"),
    }
}

fn table2_ordering() -> Outcome {
    let rows = adaptive_runs();
    let (n, p, r) = (rows[0].r_param, rows[1].r_param, rows[2].r_param);
    Outcome {
        pass: p >= 0.25 && r >= 0.25 && p > n && r > n,
        detail: format!("r_param pso {p:.3}, rtc {r:.3} >= 0.25 and > nohoope {n:.3}"),
    }
}

fn insensitivity() -> Outcome {
    let d = desk();
    let mut spreads = Vec::new();
    let mut diverged = Vec::new();
    for v in Variant::ALL {
        let mut c = d.cfg.clone();
        c.variant = v;
        let rows = harness::sweep(&c, &c.sweep_rho_x, &c.sweep_rho_theta, &d.nature, &d.obs, Some(&d.offline.prior)).unwrap();
        let nd = rows.iter().filter(|r| r.diverged).count();
        let finite: Vec<f64> = rows.iter().filter(|r| !r.diverged).map(|r| r.rmse_param).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "  {:<8} {} cells, {nd} diverged, rmse_param range [{lo:.3}, {hi:.3}], spread ratio {:.3}",
            v.name(),
            rows.len(),
            harness::rmse_param_spread(&rows)
        );
        spreads.push(harness::rmse_param_spread(&rows));
        diverged.push(nd);
    }
    let (sn, sp, sr) = (spreads[0], spreads[1], spreads[2]);
    Outcome {
        pass: diverged[1] == 0 && diverged[2] == 0 && sp <= 0.5 * sn && sr <= 0.5 * sn,
        detail: format!(
            "diverged pso {} rtc {}; spread pso {sp:.3}, rtc {sr:.3} <= 0.5 x nohoope {sn:.3}",
            diverged[1], diverged[2]
        ),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= check("1", "block combination vs delta-limit oracle", Some(secs(10)), appendix_a_oracle);
    ok &= check("2", "LETKF vs dense Kalman filter", Some(secs(5)), letkf_matches_kalman);
    ok &= check("3", "HOOPE limits", Some(secs(5)), hoope_limits);
    ok &= check("4", "transformed precision and effective inflation", Some(secs(1)), scalar_algebra);
    ok &= check("5", "Metropolis-Hastings on N(10, 4)", Some(secs(30)), mcmc_gaussian);
    ok &= check("6", "RK4 order", Some(secs(30)), rk4_order);
    ok &= check("7", "rmse_param ordering (desk, k=20, adaptive)", Some(secs(15 * 60)), table1_ordering);
    ok &= check("8", "r_param ordering (desk, k=20, adaptive)", None, table2_ordering);
    ok &= check("9", "inflation insensitivity (desk 5x5)", Some(secs(2 * 3600)), insensitivity);
    println!("criterion 10 full-scale reproduction: not run (optional; see README)");
    if !ok {
        std::process::exit(1);
    }
}
