//! Scenario presets and the drivers that run them: single homotopy windows
//! with oracle comparisons, twin experiments with cycled assimilation, and
//! inflation sweeps.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::{
    self, bootstrap_pf_diagnostics, esrf_analysis, gaussian_moment_propagation, kalman_analysis,
    MomentBackend, PfDiagnostics,
};
use crate::control::{ControlLaw, ControlOptions};
use crate::ensemble::{Ensemble, EnsembleStats, GaussianBelief, StateVector};
use crate::integrators::{
    propagate_window, propagate_window_observed, uncontrolled_paths, NoiseSource, RngStream, Scheme, StepReport,
    WindowConfig,
};
use crate::linalg;
use crate::models::{DoubleWellParams, DriftModel, HomotopyClock, Lorenz63Params, ObservationModel};
use crate::{Error, Result};

pub const SCENARIO_NAMES: [&str; 4] = ["pure-diffusion", "linear-2d", "double-well", "lorenz63"];

/// Reference state at the start of the Lorenz-63 twin experiment.
pub const LORENZ_X0: [f64; 3] = [-0.587276, -0.563678, 16.8708];

/// Inflation rates `0.025k`, `k = 0..9`.
pub fn inflation_grid() -> Vec<f64> {
    (0..10).map(|k| 0.025 * k as f64).collect()
}

/// Below this size double-well runs are known to go unstable.
pub const DOUBLE_WELL_MIN_PARTICLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    PureDiffusion,
    LinearTwoD,
    DoubleWell,
    Lorenz63,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PureDiffusion => SCENARIO_NAMES[0],
            Self::LinearTwoD => SCENARIO_NAMES[1],
            Self::DoubleWell => SCENARIO_NAMES[2],
            Self::Lorenz63 => SCENARIO_NAMES[3],
        }
    }

    /// Lorenz-63 runs as cycled assimilation; the others as one window.
    pub fn is_cycled(self) -> bool {
        self == Self::Lorenz63
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure-diffusion" => Ok(Self::PureDiffusion),
            "linear-2d" => Ok(Self::LinearTwoD),
            "double-well" => Ok(Self::DoubleWell),
            "lorenz63" => Ok(Self::Lorenz63),
            other => Err(Error::UnknownScenario {
                name: other.to_string(),
                valid: SCENARIO_NAMES.join(", "),
            }),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Homotopy,
    Esrf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Homotopy => "homotopy",
            Self::Esrf => "esrf",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homotopy" => Ok(Self::Homotopy),
            "esrf" => Ok(Self::Esrf),
            other => Err(Error::InvalidParameter(format!(
                "unknown method '{other}' (expected homotopy or esrf)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the initial ensemble is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Gaussian(GaussianBelief),
    /// `x₁ ~ N(mean, var)` and `x₂ = 2 − βx₁²`.
    Parabola {
        mean: f64,
        var: f64,
        params: DoubleWellParams,
    },
}

impl InitialCondition {
    pub fn sample(&self, m: usize, seed: u64) -> Result<Ensemble> {
        match self {
            Self::Gaussian(belief) => Ensemble::sample_gaussian(belief, m, seed),
            Self::Parabola { mean, var, params } => {
                let mut rng = RngStream::initial_conditions(seed);
                let sd = var.sqrt();
                Ensemble::new(
                    (0..m)
                        .map(|_| {
                            let x1 = mean + sd * rng.standard_normal(1)[0];
                            DVector::from_vec(vec![x1, params.parabola(x1)])
                        })
                        .collect(),
                )
            }
        }
    }

    pub fn gaussian(&self) -> Option<&GaussianBelief> {
        match self {
            Self::Gaussian(b) => Some(b),
            Self::Parabola { .. } => None,
        }
    }

    /// Center of the initial law; the truth's starting point in twin runs.
    pub fn center(&self) -> StateVector {
        match self {
            Self::Gaussian(b) => b.mean.clone(),
            Self::Parabola { mean, params, .. } => DVector::from_vec(vec![*mean, params.parabola(*mean)]),
        }
    }
}

/// A fully specified experiment. `horizon` is the window length `T` for
/// single-window scenarios and the observation interval for cycled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub drift: DriftModel,
    pub obs: ObservationModel,
    pub sigma: f64,
    pub horizon: f64,
    pub initial: InitialCondition,
    pub particles: usize,
    pub dt: f64,
    pub scheme: Scheme,
    pub law: ControlLaw,
    pub method: Method,
    pub inflation: f64,
    pub cycles: usize,
    pub seed: u64,
    pub options: ControlOptions,
    /// Multiplier on the control part of the drift (fault injection).
    pub control_scale: f64,
}

/// Optional replacements for preset values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOverrides {
    pub sigma: Option<f64>,
    /// Observation noise variance (scalar observations: `R = r·I`).
    pub r: Option<f64>,
    /// Observed value, broadcast to every observed component.
    pub y: Option<f64>,
    pub horizon: Option<f64>,
    pub particles: Option<usize>,
    pub dt: Option<f64>,
    pub scheme: Option<Scheme>,
    pub law: Option<ControlLaw>,
    pub method: Option<Method>,
    pub inflation: Option<f64>,
    pub cycles: Option<usize>,
    pub seed: Option<u64>,
    /// Variance of the initial Gaussian (or of `x₁` for the parabola law).
    pub initial_var: Option<f64>,
}

pub fn build_scenario(name: &str, overrides: &ScenarioOverrides) -> Result<Scenario> {
    let kind: ScenarioKind = name.parse()?;
    let mut s = preset(kind)?;
    if let Some(v) = overrides.sigma {
        s.sigma = v;
    }
    if overrides.r.is_some() || overrides.y.is_some() {
        let q = s.obs.obs_dim();
        let r = match overrides.r {
            Some(r) => DMatrix::identity(q, q) * r,
            None => s.obs.r().clone(),
        };
        let y = match overrides.y {
            Some(y) => DVector::from_element(q, y),
            None => s.obs.y().clone(),
        };
        s.obs = ObservationModel::new(s.obs.h().clone(), r, y)?;
    }
    if let Some(v) = overrides.horizon {
        s.horizon = v;
    }
    if let Some(v) = overrides.particles {
        s.particles = v;
    }
    if let Some(v) = overrides.dt {
        s.dt = v;
    }
    if let Some(v) = overrides.scheme {
        s.scheme = v;
    }
    match (overrides.law, overrides.scheme) {
        (Some(v), _) => s.law = v,
        (None, Some(scheme)) => s.law = compatible_law(s.law, scheme),
        (None, None) => {}
    }
    if let Some(v) = overrides.method {
        s.method = v;
    }
    if let Some(v) = overrides.inflation {
        s.inflation = v;
    }
    if let Some(v) = overrides.cycles {
        s.cycles = v;
    }
    if let Some(v) = overrides.seed {
        s.seed = v;
    }
    if let Some(var) = overrides.initial_var {
        s.initial = match s.initial {
            InitialCondition::Gaussian(b) => {
                let d = b.dim();
                InitialCondition::Gaussian(GaussianBelief::new(b.mean, DMatrix::identity(d, d) * var)?)
            }
            InitialCondition::Parabola { mean, params, .. } => InitialCondition::Parabola { mean, var, params },
        };
    }
    s.validate()?;
    Ok(s)
}

/// The preset law when it suits `scheme`, otherwise the generic constant gain.
fn compatible_law(law: ControlLaw, scheme: Scheme) -> ControlLaw {
    let robust = scheme.gain == crate::integrators::GainStepping::Robust;
    let sde = scheme.dynamics == crate::integrators::Dynamics::Sde;
    if robust || (sde && law.includes_score()) {
        ControlLaw::ConstantGain
    } else {
        law
    }
}

fn preset(kind: ScenarioKind) -> Result<Scenario> {
    let scalar = |v: f64| DMatrix::from_element(1, 1, v);
    Ok(match kind {
        ScenarioKind::PureDiffusion => Scenario {
            kind,
            drift: DriftModel::Zero { dim: 1 },
            obs: ObservationModel::observe_component(1, 0, 0.01, 1.0)?,
            sigma: 1.0,
            horizon: 1.0,
            initial: InitialCondition::Gaussian(GaussianBelief::new(DVector::zeros(1), scalar(1.0))?),
            particles: 10_000,
            dt: 0.005,
            scheme: Scheme::MEAN_FIELD,
            law: ControlLaw::PureDiffusion,
            method: Method::Homotopy,
            inflation: 0.0,
            cycles: 1,
            seed: 42,
            options: ControlOptions::default(),
            control_scale: 1.0,
        },
        ScenarioKind::LinearTwoD => Scenario {
            kind,
            drift: DriftModel::linear(
                DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -2.0]),
                DVector::zeros(2),
            )?,
            obs: ObservationModel::observe_component(2, 0, 0.01, 2.5)?,
            sigma: 0.1,
            horizon: 1.0,
            initial: InitialCondition::Gaussian(GaussianBelief::new(
                DVector::from_vec(vec![1.0, 3.0]),
                DMatrix::identity(2, 2) * 0.02,
            )?),
            particles: 10_000,
            dt: 0.001,
            scheme: Scheme::MEAN_FIELD,
            law: ControlLaw::LinearGaussian,
            method: Method::Homotopy,
            inflation: 0.0,
            cycles: 1,
            seed: 42,
            options: ControlOptions::default(),
            control_scale: 1.0,
        },
        ScenarioKind::DoubleWell => {
            let params = DoubleWellParams {
                lambda1: 2000.0,
                lambda2: 5.0,
                beta: 0.2,
            };
            Scenario {
                kind,
                drift: DriftModel::DoubleWell(params),
                obs: ObservationModel::observe_component(2, 0, 0.01, -1.5)?,
                sigma: 1.0,
                horizon: 1.0,
                initial: InitialCondition::Parabola {
                    mean: 1.5,
                    var: 0.0625,
                    params,
                },
                particles: 1000,
                dt: 2e-4,
                scheme: Scheme::ROBUST,
                law: ControlLaw::ConstantGain,
                method: Method::Homotopy,
                inflation: 0.0,
                cycles: 1,
                seed: 42,
                options: ControlOptions::default(),
                control_scale: 1.0,
            }
        }
        ScenarioKind::Lorenz63 => Scenario {
            kind,
            drift: DriftModel::Lorenz63(Lorenz63Params::default()),
            obs: ObservationModel::observe_component(3, 0, 1.0, 0.0)?,
            sigma: 0.0,
            horizon: 0.05,
            initial: InitialCondition::Gaussian(GaussianBelief::new(
                DVector::from_column_slice(&LORENZ_X0),
                DMatrix::identity(3, 3) * 0.01,
            )?),
            particles: 10,
            dt: 0.005,
            scheme: Scheme::EULER,
            law: ControlLaw::PureDrift,
            method: Method::Homotopy,
            inflation: 0.0,
            cycles: 2000,
            seed: 42,
            options: ControlOptions::default(),
            control_scale: 1.0,
        },
    })
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.particles < 2 {
            return Err(Error::TooFewParticles {
                required: 2,
                actual: self.particles,
            });
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.inflation >= 0.0) {
            return bad(format!("inflation must be >= 0, got {}", self.inflation));
        }
        if self.kind.is_cycled() && self.cycles == 0 {
            return bad("cycle count must be positive".into());
        }
        HomotopyClock::new(self.horizon, self.dt)?;
        self.window_config().validate()
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            horizon: self.horizon,
            dt: self.dt,
            sigma: self.sigma,
            law: self.law,
            scheme: self.scheme,
            inflation: self.inflation,
            options: self.options,
            control_scale: self.control_scale,
        }
    }

    /// Warnings about settings known to be fragile.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kind == ScenarioKind::DoubleWell && self.particles < DOUBLE_WELL_MIN_PARTICLES {
            out.push(format!(
                "double-well runs with fewer than {DOUBLE_WELL_MIN_PARTICLES} particles tend to become unstable (M = {})",
                self.particles
            ));
        }
        out
    }

    /// Exact prior at `T` and Kalman posterior, when drift and initial law are
    /// linear-Gaussian.
    pub fn linear_oracle(&self) -> Result<Option<(GaussianBelief, GaussianBelief)>> {
        let (Some((f, b)), Some(start)) = (self.drift.affine_parts(), self.initial.gaussian()) else {
            return Ok(None);
        };
        let prior = gaussian_moment_propagation(start, &f, &b, self.sigma, self.horizon, self.dt, MomentBackend::Exact)?;
        let post = kalman_analysis(&prior, &self.obs)?.posterior;
        Ok(Some((prior, post)))
    }
}

/// Ensemble moments at one homotopy time.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRecord {
    pub t: f64,
    pub mean: StateVector,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct WindowResult {
    pub initial: Ensemble,
    pub final_ensemble: Ensemble,
    /// Initial moments followed by the moments after every step.
    pub trajectory: Vec<MomentRecord>,
    pub reports: Vec<StepReport>,
    /// Exact prior at `T` and posterior for linear-Gaussian scenarios.
    pub oracle: Option<(GaussianBelief, GaussianBelief)>,
    pub warnings: Vec<String>,
    /// Ensembles recorded at the requested times (nearest grid point).
    pub snapshots: Vec<(f64, Ensemble)>,
}

impl WindowResult {
    pub fn final_stats(&self) -> Result<EnsembleStats> {
        EnsembleStats::from_ensemble(&self.final_ensemble)
    }
}

/// One homotopy window `t ∈ [0, T]` from a freshly sampled ensemble.
pub fn single_window_experiment(scenario: &Scenario) -> Result<WindowResult> {
    single_window_with_snapshots(scenario, &[])
}

/// [`single_window_experiment`] that also keeps the ensemble at each time in
/// `times`, taken at the first grid point not before it.
pub fn single_window_with_snapshots(scenario: &Scenario, times: &[f64]) -> Result<WindowResult> {
    let initial = scenario.initial.sample(scenario.particles, scenario.seed)?;
    let mut noise = NoiseSource::new(scenario.seed, scenario.particles);
    let mut pending: Vec<f64> = times.to_vec();
    pending.sort_by(f64::total_cmp);
    pending.dedup();
    let mut snapshots = Vec::new();
    let tol = 1e-9 * scenario.horizon;
    pending.retain(|&t| {
        if t <= tol {
            snapshots.push((0.0, initial.clone()));
            false
        } else {
            true
        }
    });
    let (final_ensemble, reports) = propagate_window_observed(
        &initial,
        &scenario.obs,
        &scenario.drift,
        &scenario.window_config(),
        &mut noise,
        scenario.name(),
        |report, ens| {
            while pending.first().is_some_and(|&t| t <= report.t_after + tol) {
                pending.remove(0);
                snapshots.push((report.t_after, ens.clone()));
            }
        },
    )?;
    let start = EnsembleStats::from_ensemble(&initial)?;
    let mut trajectory = vec![MomentRecord {
        t: 0.0,
        mean: start.mean,
        cov: start.cov,
    }];
    trajectory.extend(reports.iter().map(|r| MomentRecord {
        t: r.t_after,
        mean: r.stats_snapshot.mean.clone(),
        cov: r.stats_snapshot.cov.clone(),
    }));
    Ok(WindowResult {
        initial,
        final_ensemble,
        trajectory,
        reports,
        oracle: scenario.linear_oracle()?,
        warnings: scenario.warnings(),
        snapshots,
    })
}

/// Uncontrolled push-forward of the initial law to `T`: the prior of the
/// window's inference problem.
pub fn uncontrolled_prior(scenario: &Scenario, m: usize, seed: u64) -> Result<Ensemble> {
    let ens = scenario.initial.sample(m, seed)?;
    uncontrolled_paths(&ens, &scenario.drift, scenario.sigma, scenario.horizon, scenario.dt, seed)
}

/// Self-normalized importance-sampling estimate of the posterior mean from
/// prior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceEstimate {
    pub mean: StateVector,
    /// Weighted standard deviation per component.
    pub sd: StateVector,
    pub diagnostics: PfDiagnostics,
}

pub fn importance_posterior(prior: &Ensemble, obs: &ObservationModel) -> Result<ImportanceEstimate> {
    let diagnostics = bootstrap_pf_diagnostics(prior, obs)?;
    let d = prior.dim();
    let mut mean = DVector::zeros(d);
    for (w, x) in diagnostics.weights.iter().zip(prior.iter()) {
        mean += x * *w;
    }
    let mut var = DVector::zeros(d);
    for (w, x) in diagnostics.weights.iter().zip(prior.iter()) {
        var += (x - &mean).map(|v| v * v) * *w;
    }
    Ok(ImportanceEstimate {
        mean,
        sd: var.map(f64::sqrt),
        diagnostics,
    })
}

/// Truth trajectory and synthetic observations of a twin experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinExperiment {
    pub x0: StateVector,
    /// Truth at observation times `nΔt_obs`, `n = 1..=N`.
    pub truth: Vec<StateVector>,
    pub observations: Vec<DVector<f64>>,
    pub dt_obs: f64,
}

impl TwinExperiment {
    pub fn cycles(&self) -> usize {
        self.truth.len()
    }
}

/// Integrates the truth from the center of the initial law with explicit
/// Euler at the scenario step (noise-free) and observes it every
/// `scenario.horizon` with `N(0, R)` errors.
pub fn generate_truth_and_obs(scenario: &Scenario, cycles: usize, seed: u64) -> Result<TwinExperiment> {
    let x0 = scenario.initial.center();
    let chol = linalg::psd_sqrt(scenario.obs.r(), false)?;
    let mut rng = RngStream::observations(seed);
    let mut x = x0.clone();
    let mut truth = Vec::with_capacity(cycles);
    let mut observations = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        let mut clock = HomotopyClock::new(scenario.horizon, scenario.dt)?;
        while !clock.finished() {
            let h = clock.advance();
            x += scenario.drift.eval(&x)? * h;
        }
        if !linalg::is_finite_vec(&x) {
            return Err(Error::NonFinite {
                context: format!("{} truth", scenario.name()),
                t: truth.len() as f64 * scenario.horizon,
                particle: 0,
            });
        }
        let noise = &chol * rng.standard_normal(scenario.obs.obs_dim());
        observations.push(scenario.obs.forward(&x) + noise);
        truth.push(x.clone());
    }
    Ok(TwinExperiment {
        x0,
        truth,
        observations,
        dt_obs: scenario.horizon,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleResult {
    pub rmse: f64,
    /// Ensemble statistics after each analysis.
    pub analyses: Vec<EnsembleStats>,
}

impl CycleResult {
    pub fn means(&self) -> Vec<StateVector> {
        self.analyses.iter().map(|s| s.mean.clone()).collect()
    }
}

/// Cycled assimilation over the twin's observations. The homotopy method
/// runs a fresh window `t ∈ [0, Δt_obs]` per cycle with the scenario's control
/// law; the ESRF forecasts with the model drift and then applies the
/// square-root analysis. Both add the scenario's inflation drift.
pub fn run_assimilation_cycles(twin: &TwinExperiment, scenario: &Scenario, method: Method) -> Result<CycleResult> {
    let m = scenario.particles;
    let mut ens = scenario.initial.sample(m, scenario.seed)?;
    let mut noise = NoiseSource::new(scenario.seed, m);
    let mut config = scenario.window_config();
    config.horizon = twin.dt_obs;
    if method == Method::Esrf {
        config.law = ControlLaw::Off;
        if config.scheme.gain == crate::integrators::GainStepping::Robust {
            config.scheme = Scheme::EULER;
        }
    }
    let mut analyses = Vec::with_capacity(twin.cycles());
    for (n, y) in twin.observations.iter().enumerate() {
        let obs = scenario.obs.with_observation(y.clone())?;
        let label = format!("{} {} cycle {n}", scenario.name(), method);
        let (next, reports) = propagate_window(&ens, &obs, &scenario.drift, &config, &mut noise, &label)?;
        assert!(reports.first().is_none_or(|r| r.t_before == 0.0));
        ens = match method {
            Method::Homotopy => next,
            Method::Esrf => esrf_analysis(&next, &obs)?,
        };
        let stats = EnsembleStats::from_ensemble(&ens)?;
        if !linalg::is_finite_vec(&stats.mean) {
            return Err(Error::NonFinite {
                context: label,
                t: twin.dt_obs,
                particle: 0,
            });
        }
        analyses.push(stats);
    }
    let means: Vec<_> = analyses.iter().map(|s| s.mean.clone()).collect();
    let rmse = baselines::rmse(&means, &twin.truth)?;
    Ok(CycleResult { rmse, analyses })
}

/// One grid point of a sweep; failures are kept as messages.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub particles: usize,
    pub dt_obs: f64,
    pub inflation: f64,
    pub rmse: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub methods: Vec<Method>,
    pub particles: Vec<usize>,
    pub dt_obs: Vec<f64>,
    pub inflation: Vec<f64>,
}

impl SweepGrid {
    /// `M ∈ {5, 10, 15}`, `Δt_obs ∈ {0.05, 0.10, 0.12}`, inflation `0.025k`.
    pub fn table1() -> Self {
        Self {
            methods: vec![Method::Esrf, Method::Homotopy],
            particles: vec![5, 10, 15],
            dt_obs: vec![0.05, 0.10, 0.12],
            inflation: inflation_grid(),
        }
    }

    pub fn len(&self) -> usize {
        self.methods.len() * self.particles.len() * self.dt_obs.len() * self.inflation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Smallest RMSE over inflation for one `(method, M, Δt_obs)`, with the
    /// inflation that attains it.
    pub fn best(&self, method: Method, particles: usize, dt_obs: f64) -> Option<(f64, f64)> {
        self.cells
            .iter()
            .filter(|c| c.method == method && c.particles == particles && c.dt_obs == dt_obs)
            .filter_map(|c| c.rmse.as_ref().ok().map(|r| (*r, c.inflation)))
            .filter(|(r, _)| r.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.rmse.is_err())
    }
}

/// Runs every grid cell. One twin (truth and observations) is generated per
/// `Δt_obs` from `template.seed` and shared by all methods, ensemble sizes and
/// inflation rates. `progress` is called after each finished cell.
pub fn sweep<P>(template: &Scenario, grid: &SweepGrid, progress: P) -> Result<SweepResult>
where
    P: Fn(&SweepCell) + Sync,
{
    if grid.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    let twins = grid
        .dt_obs
        .iter()
        .map(|&dt_obs| {
            let mut s = template.clone();
            s.horizon = dt_obs;
            s.validate()?;
            generate_truth_and_obs(&s, template.cycles, template.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::with_capacity(grid.len());
    for &method in &grid.methods {
        for &m in &grid.particles {
            for (k, &dt_obs) in grid.dt_obs.iter().enumerate() {
                for &inflation in &grid.inflation {
                    jobs.push((method, m, k, dt_obs, inflation));
                }
            }
        }
    }
    let cells = jobs
        .into_par_iter()
        .map(|(method, m, k, dt_obs, inflation)| {
            let mut s = template.clone();
            s.particles = m;
            s.horizon = dt_obs;
            s.inflation = inflation;
            let rmse = s
                .validate()
                .and_then(|_| run_assimilation_cycles(&twins[k], &s, method))
                .map(|r| r.rmse)
                .map_err(|e| e.to_string());
            let cell = SweepCell {
                method,
                particles: m,
                dt_obs,
                inflation,
                rmse,
            };
            progress(&cell);
            cell
        })
        .collect();
    Ok(SweepResult {
        grid: grid.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn none() -> ScenarioOverrides {
        ScenarioOverrides::default()
    }

    #[test]
    fn presets_carry_stated_parameters() {
        let pd = build_scenario("pure-diffusion", &none()).unwrap();
        assert_eq!(pd.obs.r()[(0, 0)], 0.01);
        assert_eq!((pd.sigma, pd.obs.h()[(0, 0)], pd.obs.y()[0], pd.horizon), (1.0, 1.0, 1.0, 1.0));
        let b = pd.initial.gaussian().unwrap();
        assert_eq!((b.mean[0], b.cov[(0, 0)]), (0.0, 1.0));

        let lz = build_scenario("lorenz63", &none()).unwrap();
        assert_eq!(lz.initial.center().as_slice(), &LORENZ_X0);
        assert_eq!(lz.obs.h().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!((lz.obs.r()[(0, 0)], lz.dt), (1.0, 0.005));

        let dw = build_scenario("double-well", &none()).unwrap();
        assert_eq!(dw.initial, InitialCondition::Parabola {
            mean: 1.5,
            var: 0.0625,
            params: DoubleWellParams { lambda1: 2000.0, lambda2: 5.0, beta: 0.2 },
        });
        let ens = dw.initial.sample(50, 1).unwrap();
        assert!(ens.iter().all(|x| x[1] == 2.0 - 0.2 * x[0] * x[0]));
        assert_eq!(dw.scheme, Scheme::ROBUST);
    }

    #[test]
    fn unknown_scenario_lists_valid_names() {
        let err = build_scenario("lorenz96", &none()).unwrap_err();
        let msg = err.to_string();
        for name in SCENARIO_NAMES {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn overrides_apply() {
        let o = ScenarioOverrides {
            sigma: Some(0.5),
            r: Some(0.1),
            particles: Some(77),
            seed: Some(9),
            ..Default::default()
        };
        let s = build_scenario("pure-diffusion", &o).unwrap();
        assert_eq!((s.sigma, s.obs.r()[(0, 0)], s.particles, s.seed), (0.5, 0.1, 77, 9));
        assert!(build_scenario("pure-diffusion", &ScenarioOverrides { particles: Some(1), ..Default::default() }).is_err());
    }

    #[test]
    fn small_double_well_ensembles_warn() {
        let s = build_scenario("double-well", &ScenarioOverrides { particles: Some(50), ..Default::default() }).unwrap();
        assert_eq!(s.warnings().len(), 1);
        assert!(build_scenario("double-well", &none()).unwrap().warnings().is_empty());
    }

    #[test]
    fn noise_free_observations_equal_truth() {
        let s = build_scenario("lorenz63", &ScenarioOverrides { r: Some(1e-300), ..Default::default() }).unwrap();
        let twin = generate_truth_and_obs(&s, 20, 3).unwrap();
        for (x, y) in twin.truth.iter().zip(&twin.observations) {
            assert!((y[0] - x[0]).abs() < 1e-100);
        }
        assert_eq!(generate_truth_and_obs(&s, 20, 3).unwrap(), twin);
    }

    #[test]
    fn truth_uses_fixed_euler_steps() {
        let s = build_scenario("lorenz63", &none()).unwrap();
        let twin = generate_truth_and_obs(&s, 3, 1).unwrap();
        let mut x = DVector::from_column_slice(&LORENZ_X0);
        for _ in 0..30 {
            x += s.drift.eval(&x).unwrap() * 0.005;
        }
        assert_eq!(twin.truth[2], x);
    }

    #[test]
    fn perfect_start_without_control_tracks_truth() {
        let o = ScenarioOverrides {
            initial_var: Some(0.0),
            law: Some(ControlLaw::Off),
            particles: Some(4),
            ..Default::default()
        };
        let s = build_scenario("lorenz63", &o).unwrap();
        let twin = generate_truth_and_obs(&s, 200, 2).unwrap();
        let res = run_assimilation_cycles(&twin, &s, Method::Homotopy).unwrap();
        assert!(res.rmse <= 1e-8, "rmse {}", res.rmse);
    }

    #[test]
    fn single_cell_sweep_matches_direct_run() {
        let s = build_scenario("lorenz63", &ScenarioOverrides { cycles: Some(50), ..Default::default() }).unwrap();
        let grid = SweepGrid {
            methods: vec![Method::Homotopy],
            particles: vec![10],
            dt_obs: vec![0.05],
            inflation: vec![0.05],
        };
        let res = sweep(&s, &grid, |_| {}).unwrap();
        let mut direct = s.clone();
        direct.inflation = 0.05;
        let twin = generate_truth_and_obs(&direct, 50, s.seed).unwrap();
        let expected = run_assimilation_cycles(&twin, &direct, Method::Homotopy).unwrap().rmse;
        assert_eq!(res.cells.len(), 1);
        assert_eq!(res.cells[0].rmse, Ok(expected));
        assert_eq!(res.best(Method::Homotopy, 10, 0.05), Some((expected, 0.05)));
    }

    #[test]
    fn best_never_exceeds_any_inflation() {
        let s = build_scenario("lorenz63", &ScenarioOverrides { cycles: Some(40), ..Default::default() }).unwrap();
        let grid = SweepGrid {
            methods: vec![Method::Esrf, Method::Homotopy],
            particles: vec![5],
            dt_obs: vec![0.05],
            inflation: vec![0.0, 0.1, 0.2],
        };
        let res = sweep(&s, &grid, |_| {}).unwrap();
        assert_eq!(res.cells.len(), 6);
        for method in [Method::Esrf, Method::Homotopy] {
            let (best, _) = res.best(method, 5, 0.05).unwrap();
            for c in res.cells.iter().filter(|c| c.method == method) {
                assert!(best <= *c.rmse.as_ref().unwrap());
            }
        }
    }

    #[test]
    fn table1_grid_has_ninety_runs_per_method() {
        assert_eq!(SweepGrid::table1().len(), 180);
        assert_relative_eq!(inflation_grid()[9], 0.225, epsilon = 1e-15);
    }

    #[test]
    fn brownian_window_spreads_linearly() {
        let o = ScenarioOverrides {
            law: Some(ControlLaw::Off),
            scheme: Some(Scheme::EULER),
            particles: Some(20_000),
            ..Default::default()
        };
        let s = build_scenario("pure-diffusion", &o).unwrap();
        let res = single_window_experiment(&s).unwrap();
        assert_eq!(res.trajectory.len(), 201);
        let v0 = res.trajectory[0].cov[(0, 0)];
        for rec in res.trajectory.iter().step_by(40) {
            let expected = v0 + 2.0 * rec.t;
            assert!((rec.cov[(0, 0)] - expected).abs() < 0.06 * expected, "t = {}", rec.t);
        }
    }

    #[test]
    fn linear_oracle_attached_only_for_linear_scenarios() {
        let lin = build_scenario("linear-2d", &none()).unwrap();
        let (_, post) = lin.linear_oracle().unwrap().unwrap();
        assert_relative_eq!(post.mean[0], 2.24535, epsilon = 1e-4);
        assert!(build_scenario("double-well", &none()).unwrap().linear_oracle().unwrap().is_none());
    }
}
