//! The `scenario`, `sweep` and `validate` commands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use homotopy_da::ensemble::EnsembleStats;
use homotopy_da::experiments::{
    build_scenario, generate_truth_and_obs, inflation_grid, run_assimilation_cycles, single_window_with_snapshots,
    sweep, Method, MomentRecord, Scenario, ScenarioKind, SweepGrid, SweepResult,
};

use crate::checks::{self, Check};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{self, join_floats, stats_lines};

/// Fault-injection multiplier applied to the control by the hidden testing
/// flag.
pub const FAULT_CONTROL_SCALE: f64 = 1.1;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

/// Scenario from the merged configuration with single-valued settings.
pub fn scenario_from_config(cfg: &RunConfig, control_scale: f64) -> Result<Scenario> {
    let name = cfg.scenario_name()?;
    let kind: ScenarioKind = name.parse()?;
    let mut s = build_scenario(name, &cfg.single_run_overrides(kind.is_cycled())?)?;
    s.control_scale = control_scale;
    s.validate()?;
    Ok(s)
}

/// Everything a scenario run writes, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub moments_csv: Vec<u8>,
    pub particles_csv: Option<Vec<u8>>,
    pub summary: String,
    pub dim: usize,
}

fn header(s: &Scenario) -> String {
    let mut text = format!(
        "scenario = {}\nmethod = {}\nscheme = {}\nparticles = {}\ndt = {:?}\n",
        s.name(),
        s.method,
        s.scheme,
        s.particles,
        s.dt
    );
    if s.kind.is_cycled() {
        text.push_str(&format!(
            "dtobs = {:?}\ncycles = {}\ninflation = {:?}\n",
            s.horizon, s.cycles, s.inflation
        ));
    } else {
        text.push_str(&format!("horizon = {:?}\nsigma = {:?}\n", s.horizon, s.sigma));
    }
    text.push_str(&format!("seed = {}\n", s.seed));
    if s.control_scale != 1.0 {
        text.push_str(&format!("control_scale = {:?}\n", s.control_scale));
    }
    text
}

/// Runs one scenario. Single-window scenarios record moments after every
/// step and particles at `snapshots` (default: start and end); cycled
/// scenarios record the analysis moments of every cycle.
pub fn run_scenario(s: &Scenario, snapshots: Option<&[f64]>) -> Result<ScenarioOutput> {
    let mut summary = header(s);
    let mut moments_csv = Vec::new();
    if s.kind.is_cycled() {
        if snapshots.is_some() {
            return Err(CliError::config("particle snapshots apply to single-window scenarios"));
        }
        let twin = generate_truth_and_obs(s, s.cycles, s.seed)?;
        let result = run_assimilation_cycles(&twin, s, s.method)?;
        let start = EnsembleStats::from_ensemble(&s.initial.sample(s.particles, s.seed)?)?;
        let records: Vec<MomentRecord> = std::iter::once((0.0, &start))
            .chain(
                result
                    .analyses
                    .iter()
                    .enumerate()
                    .map(|(n, a)| ((n + 1) as f64 * s.horizon, a)),
            )
            .map(|(t, a)| MomentRecord {
                t,
                mean: a.mean.clone(),
                cov: a.cov.clone(),
            })
            .collect();
        output::write_moments(&mut moments_csv, &records).map_err(|e| CliError::io("moments.csv", e))?;
        if let Some(last) = result.analyses.last() {
            summary.push_str(&stats_lines("final", last));
        }
        summary.push_str(&format!("rmse = {:?}\n", result.rmse));
        return Ok(ScenarioOutput {
            moments_csv,
            particles_csv: None,
            summary,
            dim: s.drift.dim(),
        });
    }
    if s.method == Method::Esrf {
        return Err(CliError::config("the esrf method applies to cycled scenarios only"));
    }
    let times = snapshots.map_or_else(|| vec![0.0, s.horizon], <[f64]>::to_vec);
    let result = single_window_with_snapshots(s, &times)?;
    output::write_moments(&mut moments_csv, &result.trajectory).map_err(|e| CliError::io("moments.csv", e))?;
    let mut particles_csv = Vec::new();
    output::write_particles(&mut particles_csv, &result.snapshots).map_err(|e| CliError::io("particles.csv", e))?;
    summary.push_str(&stats_lines("final", &result.final_stats()?));
    if let Some((prior, post)) = &result.oracle {
        summary.push_str(&format!(
            "oracle_prior_mean = {}\noracle_prior_cov = {}\noracle_posterior_mean = {}\noracle_posterior_cov = {}\n",
            join_floats(prior.mean.iter().copied()),
            join_floats(output::cov_entries(&prior.cov)),
            join_floats(post.mean.iter().copied()),
            join_floats(output::cov_entries(&post.cov)),
        ));
        let stats = result.final_stats()?;
        summary.push_str(&format!(
            "mean_error = {}\n",
            join_floats((&stats.mean - &post.mean).iter().copied())
        ));
    }
    for w in &result.warnings {
        summary.push_str(&format!("warning = {w}\n"));
    }
    Ok(ScenarioOutput {
        moments_csv,
        particles_csv: Some(particles_csv),
        summary,
        dim: s.drift.dim(),
    })
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    output::write_file(dir, name, |w| w.write_all(bytes))
}

pub fn cmd_scenario(cfg: &RunConfig, control_scale: f64) -> Result<Vec<PathBuf>> {
    let s = scenario_from_config(cfg, control_scale)?;
    for w in s.warnings() {
        eprintln!("warning: {w}");
    }
    let out = run_scenario(&s, cfg.snapshots.as_deref())?;
    let dir = out_dir(cfg)?;
    let mut written = vec![write_bytes(&dir, "moments.csv", &out.moments_csv)?];
    if let Some(bytes) = &out.particles_csv {
        written.push(write_bytes(&dir, "particles.csv", bytes)?);
    }
    written.push(write_bytes(&dir, "summary.txt", out.summary.as_bytes())?);
    if cfg.emit_plot_script == Some(true) {
        written.push(write_bytes(&dir, "plot.gp", output::moments_plot_script(out.dim).as_bytes())?);
    }
    print!("{}", out.summary);
    Ok(written)
}

/// The sweep grid: both methods, `M ∈ {5, 10, 15}`, `Δt_obs ∈ {0.05, 0.10,
/// 0.12}` and the ten inflation rates unless the configuration narrows them.
pub fn sweep_grid(cfg: &RunConfig) -> SweepGrid {
    let table = SweepGrid::table1();
    SweepGrid {
        methods: cfg.methods.clone().unwrap_or(table.methods),
        particles: cfg.particles.clone().unwrap_or(table.particles),
        dt_obs: cfg.dtobs.clone().unwrap_or(table.dt_obs),
        inflation: cfg.inflation.clone().unwrap_or_else(inflation_grid),
    }
}

pub const PARTIAL_RMSE: &str = "rmse.partial.csv";

/// Runs the grid, appending each finished cell to `rmse.partial.csv` as it
/// completes so an interrupted sweep keeps its results. On completion
/// `rmse.csv` (grid order) and `table1.txt` are written and the partial file
/// is removed.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    let name = cfg.scenario.as_deref().unwrap_or("lorenz63");
    let kind: ScenarioKind = name.parse()?;
    if !kind.is_cycled() {
        return Err(CliError::config(format!("sweeps need a cycled scenario, got {name}")));
    }
    let grid = sweep_grid(cfg);
    let single = RunConfig {
        scenario: Some(name.to_string()),
        methods: None,
        particles: None,
        dtobs: None,
        inflation: None,
        ..cfg.clone()
    };
    let template = scenario_from_config(&single, 1.0)?;
    let dir = out_dir(cfg)?;
    let partial_path = dir.join(PARTIAL_RMSE);
    let file = fs::File::create(&partial_path).map_err(|e| CliError::io(&partial_path, e))?;
    let mut partial = output::csv_writer(file).map_err(|e| CliError::io(&partial_path, e))?;
    partial
        .write_record(output::RMSE_HEADER)
        .and_then(|_| partial.flush().map_err(Into::into))
        .map_err(|e| CliError::io(&partial_path, e.into()))?;
    let partial = Mutex::new(partial);
    let total = grid.len();
    let done = Mutex::new(0usize);
    let result = sweep(&template, &grid, |cell| {
        let mut n = done.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        match &cell.rmse {
            Ok(r) => eprintln!(
                "[{}/{total}] {} M={} dtobs={} inflation={} rmse={r:.4}",
                *n, cell.method, cell.particles, cell.dt_obs, cell.inflation
            ),
            Err(e) => eprintln!(
                "[{}/{total}] {} M={} dtobs={} inflation={} failed: {e}",
                *n, cell.method, cell.particles, cell.dt_obs, cell.inflation
            ),
        }
        let mut w = partial.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = w.write_record(output::rmse_row(cell)).and_then(|_| w.flush().map_err(Into::into)) {
            eprintln!("warning: cannot append to {}: {e}", partial_path.display());
        }
    })?;
    drop(partial);
    output::write_file(&dir, "rmse.csv", |w| output::write_rmse(w, &result.cells))?;
    let table = output::table1_text(&result);
    write_bytes(&dir, "table1.txt", table.as_bytes())?;
    if cfg.emit_plot_script == Some(true) {
        write_bytes(&dir, "plot.gp", output::sweep_plot_script(&result).as_bytes())?;
    }
    fs::remove_file(&partial_path).map_err(|e| CliError::io(&partial_path, e))?;
    print!("{table}");
    let failed = result.failures().count();
    if failed > 0 {
        return Err(CliError::CellsFailed { failed, total });
    }
    Ok(result)
}

/// Scenario used by the determinism check: the SDE path of the linear 2D
/// problem with enough particles to exercise the parallel code paths.
fn determinism_scenario(seed: u64) -> Result<Scenario> {
    let cfg = RunConfig {
        scenario: Some("linear-2d".into()),
        particles: Some(vec![300]),
        dt: Some(0.01),
        horizon: Some(0.2),
        scheme: Some(homotopy_da::integrators::Scheme::EULER),
        seed: Some(seed),
        ..Default::default()
    };
    scenario_from_config(&cfg, 1.0)
}

/// Byte-identical scenario output per seed across repeated runs and
/// thread counts.
pub fn determinism_check(seeds: &[u64]) -> Check {
    let name = "CSV output is deterministic per seed";
    let body = || -> Result<Check> {
        let mut details = Vec::new();
        let mut passed = true;
        for &seed in seeds {
            let s = determinism_scenario(seed)?;
            let run = |threads: usize| -> Result<ScenarioOutput> {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| CliError::config(e.to_string()))?;
                pool.install(|| run_scenario(&s, None))
            };
            let outputs = [run(1)?, run(1)?, run(4)?];
            let same = outputs.iter().all(|o| o == &outputs[0]);
            passed &= same;
            details.push(format!("seed {seed}: {}", if same { "identical" } else { "differs" }));
        }
        Ok(Check::new(name, passed, details.join(", ")))
    };
    body().unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
}

/// Options of the `validate` command.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub particles: Option<usize>,
    pub seeds: Vec<u64>,
    pub control_scale: f64,
}

/// Oracle checks: moment matching on the linear scenarios, the identities
/// behind the control and determinism.
pub fn validation_checks(opts: &ValidateOptions) -> Vec<Check> {
    vec![
        checks::pure_diffusion_moment_match(opts.particles, opts.control_scale, 3.0),
        checks::linear_moment_match(opts.particles, opts.control_scale, 3.0),
        checks::stein_identity(),
        checks::null_data_limit(),
        checks::pure_diffusion_specialization(),
        checks::linear_specialization(),
        checks::omega_sign_change(),
        checks::esrf_exactness(),
        checks::double_well_gradient(),
        determinism_check(&opts.seeds),
    ]
}

pub fn cmd_validate(opts: &ValidateOptions) -> Result<Vec<Check>> {
    let results = validation_checks(opts);
    for c in &results {
        println!("{}", c.line());
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Validation {
            failed,
            total: results.len(),
        });
    }
    Ok(results)
}
