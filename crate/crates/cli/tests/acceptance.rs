//! Acceptance suite: one test per criterion, each printing one PASS/FAIL
//! line per check. Tests hold a shared lock so wall-clock limits are not
//! distorted by concurrent tests, and write straight to stdout so the lines
//! show up without `--nocapture`.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use homotopy_da::baselines::{bootstrap_pf_diagnostics, kalman_analysis};
use homotopy_da::ensemble::GaussianBelief;
use homotopy_da::experiments::{
    build_scenario, importance_posterior, single_window_experiment, sweep, uncontrolled_prior, Method, Scenario,
    ScenarioOverrides, SweepGrid, SweepResult,
};
use homotopy_da::integrators::Scheme;
use homotopy_da::{DMatrix, DVector};
use homotopy_da_cli::checks::{self, OracleComparison};
use homotopy_da_cli::output::cov_entries;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints one result line and records failures.
struct Report {
    criterion: &'static str,
    failures: Vec<String>,
}

impl Report {
    fn new(criterion: &'static str) -> Self {
        Self {
            criterion,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, label: &str, passed: bool, detail: impl AsRef<str>) {
        let tag = if passed { "PASS" } else { "FAIL" };
        let line = format!("{tag} criterion {} {label}: {}", self.criterion, detail.as_ref());
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        if !passed {
            self.failures.push(line);
        }
    }

    fn info(&self, label: &str, detail: impl AsRef<str>) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "INFO criterion {} {label}: {}", self.criterion, detail.as_ref());
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "failed checks:\n{}", self.failures.join("\n"));
    }
}

fn overrides() -> ScenarioOverrides {
    ScenarioOverrides::default()
}

fn timed<T>(body: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = body();
    (out, start.elapsed().as_secs_f64())
}

/// Scalar Kalman posterior for prior variance `sigma0 + 2σT`, `H = 1`.
fn scalar_posterior(sigma0: f64, sigma: f64, horizon: f64, r: f64, y: f64) -> (f64, f64) {
    let prior = sigma0 + 2.0 * sigma * horizon;
    let k = prior / (prior + r);
    (k * y, prior * (1.0 - k))
}

fn final_mean_var(s: &Scenario) -> (f64, f64, f64) {
    let (res, secs) = timed(|| single_window_experiment(s).unwrap());
    let st = res.final_stats().unwrap();
    (st.mean[0], st.cov[(0, 0)], secs)
}

#[test]
fn criterion_1a_stated_preset() {
    let _g = serial();
    let mut rep = Report::new("1a");
    // σ = 1/2 gives Σ_T = 2 as printed; the printed moments 0.9524/0.0952
    // are checked literally even though R = 0.01 implies K = 2/2.01.
    let s = build_scenario(
        "pure-diffusion",
        &ScenarioOverrides {
            sigma: Some(0.5),
            ..overrides()
        },
    )
    .unwrap();
    assert_eq!((s.particles, s.dt, s.obs.r()[(0, 0)]), (10_000, 0.005, 0.01));
    let (mean, var, secs) = final_mean_var(&s);
    rep.check(
        "mean",
        (mean - 0.9524).abs() <= 0.02,
        format!("final mean {mean:.5}, target 0.9524 +- 0.02"),
    );
    rep.check(
        "variance",
        (var - 0.0952).abs() <= 0.012,
        format!("final variance {var:.6}, target 0.0952 +- 0.012"),
    );
    rep.check("runtime", secs < 5.0, format!("{secs:.2} s (limit 5 s)"));
    let (km, kv) = scalar_posterior(1.0, 0.5, 1.0, 0.01, 1.0);
    rep.info(
        "consistent posterior",
        format!("Kalman posterior for these parameters is mean {km:.5}, variance {kv:.6}"),
    );

    // The printed numbers are the R = 0.1 posterior.
    let s = build_scenario(
        "pure-diffusion",
        &ScenarioOverrides {
            sigma: Some(0.5),
            r: Some(0.1),
            ..overrides()
        },
    )
    .unwrap();
    let (mean, var, _) = final_mean_var(&s);
    rep.info(
        "R = 0.1 variant",
        format!("final mean {mean:.5}, variance {var:.6} (0.9524 +- 0.02, 0.0952 +- 0.012)"),
    );
    rep.finish();
}

#[test]
fn criterion_1b_kalman_oracle() {
    let _g = serial();
    let mut rep = Report::new("1b");
    let s = build_scenario("pure-diffusion", &overrides()).unwrap();
    assert_eq!((s.sigma, s.particles, s.dt), (1.0, 10_000, 0.005));
    let (om, ov) = scalar_posterior(1.0, 1.0, 1.0, 0.01, 1.0);
    let (_, post) = s.linear_oracle().unwrap().unwrap();
    assert!((post.mean[0] - om).abs() < 1e-12 && (post.cov[(0, 0)] - ov).abs() < 1e-12);
    let (mean, var, secs) = final_mean_var(&s);
    rep.check(
        "mean",
        (mean - om).abs() <= 0.02,
        format!("final mean {mean:.5}, oracle {om:.5} +- 0.02"),
    );
    rep.check(
        "variance",
        (var - ov).abs() <= 0.012,
        format!("final variance {var:.6}, oracle {ov:.6} +- 0.012"),
    );
    rep.check("runtime", secs < 5.0, format!("{secs:.2} s (limit 5 s)"));
    rep.finish();
}

const REFERENCE_MEAN: [f64; 2] = [2.25, 1.50];
const REFERENCE_COV: [f64; 3] = [0.0086, 0.0039, 0.0503];

fn reference_bounds(rep: &mut Report, path: &str, cmp: &OracleComparison) {
    let (mean, cov) = cmp.estimate_entries();
    let mean_ok = mean.iter().zip(REFERENCE_MEAN).all(|(e, p)| (e - p).abs() <= 0.05);
    rep.check(
        &format!("{path} mean"),
        mean_ok,
        format!("({:.5}, {:.5}) vs (2.25, 1.50) +- 0.05", mean[0], mean[1]),
    );
    let cov_ok = cov.iter().zip(REFERENCE_COV).all(|(e, p)| (e - p).abs() <= 0.3 * p);
    rep.check(
        &format!("{path} covariance"),
        cov_ok,
        format!(
            "({:.5}, {:.5}, {:.5}) vs (0.0086, 0.0039, 0.0503) +- 30%",
            cov[0], cov[1], cov[2]
        ),
    );
}

fn oracle_band(rep: &mut Report, path: &str, cmp: &OracleComparison, se_mean: &[f64], se_cov: &[f64], how: &str) {
    let z = cmp.worst_z(se_mean, se_cov);
    let (om, oc) = cmp.oracle_entries();
    rep.check(
        &format!("{path} oracle"),
        z <= 3.0,
        format!(
            "worst deviation {z:.2} SE from exact posterior mean ({:.5}, {:.5}), cov ({:.5}, {:.5}, {:.5}); SE {how}",
            om[0], om[1], oc[0], oc[1], oc[2]
        ),
    );
}

/// Sample standard deviation per entry (means then covariances) over
/// independent replicate runs.
fn replicate_sd(s: &Scenario, seeds: impl Iterator<Item = u64>) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = seeds
        .map(|seed| {
            let mut r = s.clone();
            r.seed = seed;
            let st = single_window_experiment(&r).unwrap().final_stats().unwrap();
            st.mean.iter().copied().chain(cov_entries(&st.cov)).collect()
        })
        .collect();
    let n = rows.len() as f64;
    let k = rows[0].len();
    let sd: Vec<f64> = (0..k)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let d = s.drift.dim();
    (sd[..d].to_vec(), sd[d..].to_vec())
}

#[test]
fn criterion_2_linear_posterior() {
    let _g = serial();
    let mut rep = Report::new("2");
    let mean_field = build_scenario("linear-2d", &overrides()).unwrap();
    assert_eq!((mean_field.particles, mean_field.dt), (10_000, 0.001));
    assert_eq!(mean_field.scheme, Scheme::MEAN_FIELD);
    let sde = build_scenario(
        "linear-2d",
        &ScenarioOverrides {
            scheme: Some(Scheme::EULER),
            ..overrides()
        },
    )
    .unwrap();

    // Exact posterior from the closed-form prior moments, independent of the
    // library's propagation: F = [[-2, 1], [1, -2]] has eigenvectors
    // (1, 1)/√2 and (1, -1)/√2 with eigenvalues -1 and -3.
    let (l1, l2, sigma, horizon) = (-1.0f64, -3.0f64, 0.1, 1.0);
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]) / 2f64.sqrt();
    let m0 = q.transpose() * DVector::from_vec(vec![1.0, 3.0]);
    let prior_mean = &q * DVector::from_vec(vec![m0[0] * (l1 * horizon).exp(), m0[1] * (l2 * horizon).exp()]);
    let var = |l: f64| 0.02 * (2.0 * l * horizon).exp() + 2.0 * sigma * ((2.0 * l * horizon).exp() - 1.0) / (2.0 * l);
    let prior_cov = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![var(l1), var(l2)])) * q.transpose();
    let post = kalman_analysis(&GaussianBelief::new(prior_mean, prior_cov).unwrap(), &mean_field.obs)
        .unwrap()
        .posterior;
    let (_, lib_post) = mean_field.linear_oracle().unwrap().unwrap();
    assert!((&lib_post.mean - &post.mean).amax() < 1e-10 && (&lib_post.cov - &post.cov).amax() < 1e-10);

    let mf = OracleComparison::run(&mean_field).unwrap();
    reference_bounds(&mut rep, "mean-field", &mf);
    let (se_mean, se_cov) = mf.iid_standard_errors();
    oracle_band(&mut rep, "mean-field", &mf, &se_mean, &se_cov, "of M independent posterior draws");

    let sd = OracleComparison::run(&sde).unwrap();
    reference_bounds(&mut rep, "SDE", &sd);
    // Interacting particles are not independent; the standard error is the
    // spread of the final moments over independent replicate runs.
    let replicates = 6;
    let (se_mean, se_cov) = replicate_sd(&sde, 1..=replicates);
    oracle_band(
        &mut rep,
        "SDE",
        &sd,
        &se_mean,
        &se_cov,
        &format!("from {replicates} replicate runs at M = {}", sde.particles),
    );

    let total = mf.seconds + sd.seconds;
    rep.check(
        "runtime",
        total < 30.0,
        format!("mean-field {:.2} s + SDE {:.2} s = {total:.2} s (limit 30 s)", mf.seconds, sd.seconds),
    );
    rep.finish();
}

#[test]
fn criterion_3_double_well() {
    let _g = serial();
    let mut rep = Report::new("3");
    let s = build_scenario("double-well", &overrides()).unwrap();
    assert_eq!((s.particles, s.scheme), (1000, Scheme::ROBUST));
    let (res, secs) = timed(|| single_window_experiment(&s).unwrap());
    let m = res.final_ensemble.len() as f64;
    let inside = |lo: f64, hi: f64| res.final_ensemble.iter().filter(|x| (lo..=hi).contains(&x[0])).count() as f64 / m;

    let frac = inside(-1.95, -1.05);
    rep.check("band", frac >= 0.9, format!("{:.1}% of x1 in [-1.95, -1.05] (limit 90%)", 100.0 * frac));

    let params = match s.drift {
        homotopy_da::models::DriftModel::DoubleWell(p) => p,
        _ => unreachable!(),
    };
    let dev = res
        .final_ensemble
        .iter()
        .map(|x| (x[1] - (2.0 - params.beta * x[0] * x[0])).abs())
        .sum::<f64>()
        / m;
    rep.check("parabola", dev <= 0.2, format!("mean |x2 - (2 - beta x1^2)| = {dev:.4} (limit 0.2)"));

    let prior = uncontrolled_prior(&s, s.particles, s.seed).unwrap();
    let ess = bootstrap_pf_diagnostics(&prior, &s.obs).unwrap().ess;
    rep.check(
        "degeneracy",
        ess < 0.05 * m,
        format!("prior ESS {ess:.1} for M = {m} (limit {:.0})", 0.05 * m),
    );

    let oracle_m = 100_000;
    let is = importance_posterior(&uncontrolled_prior(&s, oracle_m, s.seed + 1).unwrap(), &s.obs).unwrap();
    let (lo, hi) = (is.mean[0] - 3.0 * is.sd[0], is.mean[0] + 3.0 * is.sd[0]);
    let frac_is = inside(lo, hi);
    rep.check(
        "oracle band",
        frac_is >= 0.9,
        format!(
            "{:.1}% of x1 in the importance-sampling 3 sd band [{lo:.3}, {hi:.3}] (oracle M = {oracle_m}, ESS {:.0}; limit 90%)",
            100.0 * frac_is,
            is.diagnostics.ess
        ),
    );
    rep.info(
        "means",
        format!(
            "homotopy x1 mean {:.4}, importance-sampling posterior x1 mean {:.4} (sd {:.4})",
            res.final_stats().unwrap().mean[0],
            is.mean[0],
            is.sd[0]
        ),
    );
    rep.check("runtime", secs < 60.0, format!("{secs:.2} s (limit 60 s)"));
    rep.finish();
}

/// Table 1 as `[Δt_obs][M]` for `(ESRF, homotopy)`.
const TABLE1_ESRF: [[f64; 3]; 3] = [[0.5712, 0.5620, 0.5659], [0.8466, 0.8171, 0.8229], [0.9606, 0.9515, 0.9375]];
const TABLE1_HOMOTOPY: [[f64; 3]; 3] = [[0.5457, 0.5475, 0.5496], [0.7735, 0.7627, 0.7707], [0.8645, 0.8621, 0.8615]];

fn table1_checks(rep: &mut Report, result: &SweepResult, tol: f64) {
    let grid = SweepGrid::table1();
    for (method, table) in [(Method::Esrf, TABLE1_ESRF), (Method::Homotopy, TABLE1_HOMOTOPY)] {
        let mut worst = 0.0f64;
        let mut cells = Vec::new();
        for (i, &dt_obs) in grid.dt_obs.iter().enumerate() {
            for (j, &m) in grid.particles.iter().enumerate() {
                let got = result.best(method, m, dt_obs).map_or(f64::INFINITY, |b| b.0);
                worst = worst.max((got - table[i][j]).abs());
                cells.push(format!("{got:.4}"));
            }
        }
        rep.check(
            &format!("{method} values"),
            worst <= tol,
            format!("best RMSE [{}], largest deviation {worst:.4} (limit {tol})", cells.join(", ")),
        );
    }
    let mut violations = Vec::new();
    for &dt_obs in &[0.10, 0.12] {
        for &m in &grid.particles {
            let h = result.best(Method::Homotopy, m, dt_obs).map_or(f64::INFINITY, |b| b.0);
            let e = result.best(Method::Esrf, m, dt_obs).map_or(f64::INFINITY, |b| b.0);
            if h >= e {
                violations.push(format!("dtobs {dt_obs} M {m}: homotopy {h:.4} >= esrf {e:.4}"));
            }
        }
    }
    rep.check(
        "ordering",
        violations.is_empty(),
        if violations.is_empty() {
            "homotopy below ESRF in all six cells at dtobs 0.10 and 0.12".to_string()
        } else {
            violations.join("; ")
        },
    );
    assert_eq!(result.failures().count(), 0);
}

fn table1_sweep(cycles: usize) -> (SweepResult, f64) {
    let template = build_scenario(
        "lorenz63",
        &ScenarioOverrides {
            cycles: Some(cycles),
            ..overrides()
        },
    )
    .unwrap();
    assert_eq!(template.dt, 0.005);
    let grid = SweepGrid::table1();
    assert_eq!(grid.len(), 180);
    timed(|| sweep(&template, &grid, |_| {}).unwrap())
}

#[test]
fn criterion_4_lorenz_table1_ci() {
    let _g = serial();
    let mut rep = Report::new("4 (CI, N = 2000)");
    let (result, secs) = table1_sweep(2000);
    table1_checks(&mut rep, &result, 0.12);
    rep.check("runtime", secs < 120.0, format!("{secs:.1} s (limit 120 s)"));
    rep.finish();
}

/// The full protocol takes several minutes on one core; set
/// `HOMOTOPY_DA_SKIP_FULL_TABLE1=1` to skip it during development.
#[test]
fn criterion_4_lorenz_table1_full() {
    let _g = serial();
    let mut rep = Report::new("4 (full, N = 20000)");
    if std::env::var_os("HOMOTOPY_DA_SKIP_FULL_TABLE1").is_some() {
        rep.info("skipped", "HOMOTOPY_DA_SKIP_FULL_TABLE1 is set");
        return;
    }
    let (result, secs) = table1_sweep(20_000);
    table1_checks(&mut rep, &result, 0.08);
    rep.info("runtime", format!("{:.1} min", secs / 60.0));
    rep.finish();
}

fn run_cli(args: &[&str], out: &Path, threads: &str) {
    let status = Command::new(env!("CARGO_BIN_EXE_homotopy-da"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn criterion_5_properties() {
    let _g = serial();
    let mut rep = Report::new("5");
    for check in [
        checks::stein_identity(),
        checks::null_data_limit(),
        checks::pure_diffusion_specialization(),
        checks::linear_specialization(),
        checks::omega_sign_change(),
        checks::esrf_exactness(),
        checks::double_well_gradient(),
    ] {
        rep.check(&check.name, check.passed, &check.detail);
    }

    let dir = tempfile::tempdir().unwrap();
    let runs: [(&str, Vec<&str>, &[&str]); 2] = [
        (
            "scenario",
            vec![
                "scenario", "linear-2d", "--scheme", "euler", "--particles", "300", "--dt", "0.01", "--horizon", "0.2",
            ],
            &["moments.csv", "particles.csv", "summary.txt"],
        ),
        (
            "sweep",
            vec![
                "sweep", "--particles", "5,10", "--dtobs", "0.05", "--inflation", "0,0.1", "--cycles", "200",
            ],
            &["rmse.csv", "table1.txt"],
        ),
    ];
    let mut differing = Vec::new();
    for (label, base, files) in &runs {
        for seed in ["7", "8"] {
            let mut args = base.clone();
            args.extend(["--seed", seed]);
            let outs: Vec<_> = [("a", "1"), ("b", "1"), ("c", "4")]
                .iter()
                .map(|(tag, threads)| {
                    let out = dir.path().join(format!("{label}-{seed}-{tag}"));
                    run_cli(&args, &out, threads);
                    out
                })
                .collect();
            for f in *files {
                let first = std::fs::read(outs[0].join(f)).unwrap();
                for o in &outs[1..] {
                    if std::fs::read(o.join(f)).unwrap() != first {
                        differing.push(format!("{label} seed {seed} {f}"));
                    }
                }
            }
        }
    }
    rep.check(
        "determinism",
        differing.is_empty(),
        if differing.is_empty() {
            "byte-identical CSVs for seeds 7 and 8 across reruns and 1 or 4 threads".to_string()
        } else {
            format!("differences in {}", differing.join(", "))
        },
    );
    rep.finish();
}
