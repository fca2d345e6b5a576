//! Time stepping for the particle dynamics.
//!
//! Every particle owns a counter-based random stream keyed by `(seed,
//! particle index)`, so the draws a particle sees do not depend on how the
//! work is scheduled across threads. Drift evaluations run in parallel;
//! everything order-sensitive (noise draws, reductions, error reporting) is
//! sequential in particle order.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::control::{self, ControlContext, ControlLaw, ControlOptions};
use crate::ensemble::{Ensemble, EnsembleStats, StateVector};
use crate::linalg;
use crate::models::{DriftModel, HomotopyClock, ObservationModel};
use crate::{Error, Result};

const RESERVED: u64 = 1 << 63;

/// Below this ensemble size drift evaluations stay on the calling thread.
const PARALLEL_MIN: usize = 128;

/// Deterministic random stream identified by a seed and a stream id.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Stream used to draw initial ensembles.
    pub fn initial_conditions(seed: u64) -> Self {
        Self::new(seed, RESERVED)
    }

    /// Stream used for synthetic observation noise.
    pub fn observations(seed: u64) -> Self {
        Self::new(seed, RESERVED + 1)
    }

    /// Stream used for the truth trajectory's own noise, when it has any.
    pub fn truth(seed: u64) -> Self {
        Self::new(seed, RESERVED + 2)
    }

    pub fn standard_normal(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| StandardNormal.sample(self))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// One stream per particle.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    streams: Vec<RngStream>,
}

impl NoiseSource {
    pub fn new(seed: u64, particles: usize) -> Self {
        Self {
            streams: (0..particles as u64).map(|i| RngStream::new(seed, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// One `dim`-dimensional standard normal per particle.
    pub fn draw(&mut self, dim: usize) -> Vec<DVector<f64>> {
        self.streams.iter_mut().map(|s| s.standard_normal(dim)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub t_before: f64,
    pub t_after: f64,
    /// Largest `‖drift(x) − f(x)‖` over particles, including inflation,
    /// score and gain increments.
    pub max_control_norm: f64,
    /// Statistics of the ensemble after the step.
    pub stats_snapshot: EnsembleStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// Euler–Maruyama with `√(2σ dt)` noise.
    Sde,
    /// Deterministic Euler; diffusion enters through `σ Σ⁻¹ (x − μ)`.
    MeanField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainStepping {
    Explicit,
    /// Stacked regularized solve for the two constant-gain terms.
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheme {
    pub dynamics: Dynamics,
    pub gain: GainStepping,
}

impl Scheme {
    pub const EULER: Self = Self {
        dynamics: Dynamics::Sde,
        gain: GainStepping::Explicit,
    };
    pub const MEAN_FIELD: Self = Self {
        dynamics: Dynamics::MeanField,
        gain: GainStepping::Explicit,
    };
    pub const ROBUST: Self = Self {
        dynamics: Dynamics::MeanField,
        gain: GainStepping::Robust,
    };

    pub fn name(&self) -> &'static str {
        match (self.dynamics, self.gain) {
            (Dynamics::Sde, GainStepping::Explicit) => "euler",
            (Dynamics::MeanField, GainStepping::Explicit) => "meanfield",
            (Dynamics::MeanField, GainStepping::Robust) => "robust",
            (Dynamics::Sde, GainStepping::Robust) => "euler-robust",
        }
    }
}

impl Default for Scheme {
    fn default() -> Self {
        Self::EULER
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" | "sde" => Ok(Self::EULER),
            "meanfield" | "mean-field" => Ok(Self::MEAN_FIELD),
            "robust" => Ok(Self::ROBUST),
            "euler-robust" => Ok(Self {
                dynamics: Dynamics::Sde,
                gain: GainStepping::Robust,
            }),
            other => Err(Error::InvalidParameter(format!(
                "unknown scheme '{other}' (expected euler, meanfield or robust)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn drift_values<F>(ens: &Ensemble, drift: &F) -> Result<Vec<StateVector>>
where
    F: Fn(&StateVector) -> Result<StateVector> + Sync,
{
    let xs = ens.particles();
    let values: Vec<Result<StateVector>> = if xs.len() < PARALLEL_MIN {
        xs.iter().map(drift).collect()
    } else {
        xs.par_iter().map(drift).collect()
    };
    values.into_iter().collect()
}

fn indexed_values<F>(ens: &Ensemble, value: &F) -> Result<Vec<StateVector>>
where
    F: Fn(usize, &StateVector) -> Result<StateVector> + Sync,
{
    let xs = ens.particles();
    let values: Vec<Result<StateVector>> = if xs.len() < PARALLEL_MIN {
        xs.iter().enumerate().map(|(i, x)| value(i, x)).collect()
    } else {
        xs.par_iter().enumerate().map(|(i, x)| value(i, x)).collect()
    };
    values.into_iter().collect()
}

fn check_step(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("step size must be positive, got {dt}")))
    }
}

fn check_finite(particles: &[StateVector], context: &str, t: f64) -> Result<()> {
    match particles.iter().position(|x| !linalg::is_finite_vec(x)) {
        Some(particle) => Err(Error::NonFinite {
            context: context.to_string(),
            t,
            particle,
        }),
        None => Ok(()),
    }
}

fn sde_update(
    ens: &Ensemble,
    v: &[StateVector],
    sigma: f64,
    dt: f64,
    noise: &mut NoiseSource,
) -> Result<Vec<StateVector>> {
    if sigma == 0.0 {
        return Ok(ens.iter().zip(v).map(|(x, v)| x + v * dt).collect());
    }
    if noise.len() != ens.len() {
        return Err(Error::LengthMismatch {
            expected: ens.len(),
            actual: noise.len(),
        });
    }
    let scale = (2.0 * sigma * dt).sqrt();
    let xi = noise.draw(ens.dim());
    Ok(ens
        .iter()
        .zip(v)
        .zip(xi)
        .map(|((x, v), xi)| x + v * dt + xi * scale)
        .collect())
}

/// `x ← x + dt·drift(x) + √(2σ dt) ξ`, one fresh `ξ ~ N(0, I)` per particle.
/// `t` is only used to label a non-finite result.
pub fn euler_maruyama_step<F>(
    ens: &Ensemble,
    drift: F,
    sigma: f64,
    dt: f64,
    t: f64,
    noise: &mut NoiseSource,
) -> Result<Ensemble>
where
    F: Fn(&StateVector) -> Result<StateVector> + Sync,
{
    check_step(dt)?;
    let v = drift_values(ens, &drift)?;
    let next = sde_update(ens, &v, sigma, dt, noise)?;
    check_finite(&next, "euler-maruyama step", t)?;
    ens.with_particles(next)
}

/// Uncontrolled Euler-Maruyama over `[0, horizon]` for the model drift.
/// Same result as repeated [`euler_maruyama_step`] with
/// `NoiseSource::new(seed, M)`, computed particle by particle without
/// per-step allocation.
pub fn uncontrolled_paths(ens: &Ensemble, drift: &DriftModel, sigma: f64, horizon: f64, dt: f64, seed: u64) -> Result<Ensemble> {
    let d = ens.dim();
    if drift.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: drift.dim(),
            actual: d,
        });
    }
    let mut clock = HomotopyClock::new(horizon, dt)?;
    let mut steps = Vec::with_capacity(clock.steps());
    while !clock.finished() {
        steps.push((clock.t, clock.advance()));
    }
    let path = |i: usize, x0: &StateVector| -> Result<StateVector> {
        let mut rng = RngStream::new(seed, i as u64);
        let mut x = x0.as_slice().to_vec();
        let mut v = vec![0.0; d];
        for &(t, h) in &steps {
            check_step(h)?;
            drift.eval_into(&x, &mut v);
            let scale = (2.0 * sigma * h).sqrt();
            for (xk, vk) in x.iter_mut().zip(&v) {
                *xk += vk * h;
                if sigma != 0.0 {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    *xk += xi * scale;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "uncontrolled path".into(),
                    t,
                    particle: i,
                });
            }
        }
        Ok(DVector::from_vec(x))
    };
    let xs = ens.particles();
    let out: Vec<Result<StateVector>> = if xs.len() < PARALLEL_MIN {
        xs.iter().enumerate().map(|(i, x)| path(i, x)).collect()
    } else {
        xs.par_iter().enumerate().map(|(i, x)| path(i, x)).collect()
    };
    ens.with_particles(out.into_iter().collect::<Result<_>>()?)
}

/// Deterministic Euler `x ← x + dt·drift(x)`.
pub fn mean_field_ode_step<F>(ens: &Ensemble, drift: F, dt: f64, t: f64) -> Result<Ensemble>
where
    F: Fn(&StateVector) -> Result<StateVector> + Sync,
{
    check_step(dt)?;
    let v = drift_values(ens, &drift)?;
    let next: Vec<_> = ens.iter().zip(v).map(|(x, v)| x + v * dt).collect();
    check_finite(&next, "mean-field step", t)?;
    ens.with_particles(next)
}

/// `factor · (x − mean)`
pub fn inflation_drift(mean: &StateVector, factor: f64, x: &StateVector) -> StateVector {
    (x - mean) * factor
}

/// Gain matrix `−Δt Σ^{xq} (Δt Σ^{qq} + R̂)⁻¹` of a regularized ensemble
/// Kalman increment; applying it to a residual gives the increment.
#[derive(Debug, Clone)]
pub struct RobustGain {
    gain: DMatrix<f64>,
}

impl RobustGain {
    pub fn new(cross: &DMatrix<f64>, cov: &DMatrix<f64>, r_hat: &DMatrix<f64>, dt: f64) -> Result<Self> {
        check_step(dt)?;
        let q = cov.nrows();
        if cov.ncols() != q || r_hat.shape() != (q, q) || cross.ncols() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                actual: r_hat.nrows(),
            });
        }
        let mut system = cov * dt + r_hat;
        linalg::symmetrize(&mut system);
        let sol = linalg::solve(&system, &cross.transpose(), "robust gain")?;
        Ok(Self {
            gain: sol.transpose() * (-dt),
        })
    }

    pub fn increment(&self, residual: &DVector<f64>) -> DVector<f64> {
        &self.gain * residual
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

/// Single-term regularized increment `−Δt Σ^{xq} (Δt Σ^{qq} + R̂)⁻¹ r`.
pub fn robust_enkf_increment(
    cross: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    r_hat: &DMatrix<f64>,
    residual: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    Ok(RobustGain::new(cross, cov, r_hat, dt)?.increment(residual))
}

/// Regularized gain for both constant-gain terms at once. The stacked map
/// `(h, h̃)` carries effective noise `R̂ = diag(ΔtT/(t+Δt)·R, −ΔtT/t·R)`;
/// to first order in `Δt` the increment equals `Δt·ĝ`. At `t = 0` the second
/// term is absent.
pub fn stacked_robust_gain(ctx: &ControlContext<'_>, dt: f64) -> Result<RobustGain> {
    let clock = ctx.clock();
    let (t, horizon) = (clock.t, clock.horizon);
    let r = ctx.obs().r();
    let q = r.nrows();
    let m = ctx.moments();
    let r1 = r * (dt * horizon / (t + dt));
    if t == 0.0 {
        let cov = m.cov_stacked.view((0, 0), (q, q)).into_owned();
        return RobustGain::new(&m.cross_xh, &cov, &r1, dt);
    }
    let r2 = r * (-dt * horizon / t);
    let mut r_hat = DMatrix::zeros(2 * q, 2 * q);
    r_hat.view_mut((0, 0), (q, q)).copy_from(&r1);
    r_hat.view_mut((q, q), (q, q)).copy_from(&r2);
    let dx = m.cross_xh.nrows();
    let mut cross = DMatrix::zeros(dx, 2 * q);
    cross.view_mut((0, 0), (dx, q)).copy_from(&m.cross_xh);
    cross.view_mut((0, q), (dx, q)).copy_from(&m.cross_xht);
    RobustGain::new(&cross, &m.cov_stacked, &r_hat, dt)
}

fn stacked_residual(ctx: &ControlContext<'_>, i: usize, x: &StateVector) -> Result<DVector<f64>> {
    let (r_h, r_ht) = match ctx.member_residuals(i) {
        Some(r) => r,
        None => ctx.centered_residuals(x)?,
    };
    if ctx.clock().t == 0.0 {
        return Ok(r_h);
    }
    Ok(DVector::from_iterator(
        r_h.len() * 2,
        r_h.iter().chain(r_ht.iter()).copied(),
    ))
}

/// Per-particle robust gain increments for the statistics in `ctx`, which
/// must have been built from `ens`.
pub fn robust_gain_increments(ctx: &ControlContext<'_>, ens: &Ensemble, dt: f64) -> Result<Vec<StateVector>> {
    let gain = stacked_robust_gain(ctx, dt)?;
    indexed_values(ens, &|i, x: &StateVector| Ok(gain.increment(&stacked_residual(ctx, i, x)?)))
}

/// Applies only the regularized constant-gain increment to every particle.
pub fn robust_gain_step(ens: &Ensemble, ctx: &ControlContext<'_>, dt: f64) -> Result<Ensemble> {
    let inc = robust_gain_increments(ctx, ens, dt)?;
    let next: Vec<_> = ens.iter().zip(inc).map(|(x, d)| x + d).collect();
    check_finite(&next, "robust gain step", ctx.clock().t)?;
    ens.with_particles(next)
}

/// Settings for one homotopy window `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    pub horizon: f64,
    pub dt: f64,
    pub sigma: f64,
    pub law: ControlLaw,
    pub scheme: Scheme,
    /// Multiplicative inflation rate; adds `factor·(x − μ)` to the drift.
    pub inflation: f64,
    pub options: ControlOptions,
    /// Multiplier on everything added to the model drift; `1` in normal use.
    pub control_scale: f64,
}

impl WindowConfig {
    pub fn new(horizon: f64, dt: f64, sigma: f64, law: ControlLaw, scheme: Scheme) -> Self {
        Self {
            horizon,
            dt,
            sigma,
            law,
            scheme,
            inflation: 0.0,
            options: ControlOptions::default(),
            control_scale: 1.0,
        }
    }

    pub fn with_inflation(self, inflation: f64) -> Self {
        Self { inflation, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.control_scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "control scale must be finite, got {}",
                self.control_scale
            )));
        }
        if !(self.sigma >= 0.0) || !(self.inflation >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma and inflation must be >= 0, got {} and {}",
                self.sigma, self.inflation
            )));
        }
        if self.scheme.dynamics == Dynamics::Sde && self.law.includes_score() {
            return Err(Error::InvalidParameter(format!(
                "the {:?} law is a mean-field form and cannot drive the SDE scheme",
                self.law
            )));
        }
        if self.scheme.gain == GainStepping::Robust && self.law != ControlLaw::ConstantGain {
            return Err(Error::InvalidParameter(
                "robust gain stepping applies to the constant-gain law only".into(),
            ));
        }
        Ok(())
    }
}

/// Drift of ensemble member `i` excluding any robust gain increment.
fn step_drift(config: &WindowConfig, ctx: &ControlContext<'_>, i: usize, x: &StateVector) -> Result<StateVector> {
    let mut v = match (config.scheme.gain, config.law) {
        (GainStepping::Robust, _) => {
            let t_ratio = ctx.clock().t / ctx.clock().horizon;
            let f = match ctx.member_drift(i) {
                Some(f) => f.clone(),
                None => ctx.drift().eval(x)?,
            };
            f - ctx.grad_l(x) * (2.0 * config.sigma * t_ratio)
        }
        (GainStepping::Explicit, ControlLaw::ConstantGain) => match ctx.member_total_drift(i) {
            Some(v) => v,
            None => control::homotopy_total_drift(ctx, x)?,
        },
        (GainStepping::Explicit, law) => control::law_drift(law, ctx, x)?,
    };
    if config.scheme.dynamics == Dynamics::MeanField && config.sigma > 0.0 && !config.law.includes_score() {
        v -= ctx.score(x)? * config.sigma;
    }
    if config.inflation != 0.0 {
        v += inflation_drift(&ctx.stats().mean, config.inflation, x);
    }
    Ok(v)
}

/// Advances `ens` from `t = 0` to `T`, rebuilding the control context from
/// the current ensemble at the start of every step. `label` names the run in
/// error messages.
pub fn propagate_window(
    ens: &Ensemble,
    obs: &ObservationModel,
    drift: &DriftModel,
    config: &WindowConfig,
    noise: &mut NoiseSource,
    label: &str,
) -> Result<(Ensemble, Vec<StepReport>)> {
    propagate_window_observed(ens, obs, drift, config, noise, label, |_, _| {})
}

/// [`propagate_window`] calling `on_step` with each report and the ensemble
/// after that step.
pub fn propagate_window_observed<O>(
    ens: &Ensemble,
    obs: &ObservationModel,
    drift: &DriftModel,
    config: &WindowConfig,
    noise: &mut NoiseSource,
    label: &str,
    mut on_step: O,
) -> Result<(Ensemble, Vec<StepReport>)>
where
    O: FnMut(&StepReport, &Ensemble),
{
    config.validate()?;
    let mut clock = HomotopyClock::new(config.horizon, config.dt)?;
    let mut cur = ens.clone();
    let mut reports = Vec::with_capacity(clock.steps());
    while !clock.finished() {
        let step_clock = clock.with_current_step();
        let h = step_clock.dt;
        let t_before = clock.t;
        let ctx = ControlContext::with_requirements(
            &cur,
            step_clock,
            config.sigma,
            obs,
            drift,
            config.options,
            config.law.requirements(),
        )?;
        let mut v = indexed_values(&cur, &|i, x: &StateVector| step_drift(config, &ctx, i, x))?;
        if config.scheme.gain == GainStepping::Robust {
            let inc = robust_gain_increments(&ctx, &cur, h)?;
            for (vi, d) in v.iter_mut().zip(inc) {
                *vi += d / h;
            }
        }
        let fs = indexed_values(&cur, &|i, x: &StateVector| match ctx.member_drift(i) {
            Some(f) => Ok(f.clone()),
            None => drift.eval(x),
        })?;
        let mut max_control_norm = 0.0f64;
        for (vi, f) in v.iter_mut().zip(&fs) {
            if config.control_scale != 1.0 {
                *vi = f + (&*vi - f) * config.control_scale;
            }
            max_control_norm = max_control_norm.max((&*vi - f).norm());
        }
        let next = match config.scheme.dynamics {
            Dynamics::Sde => sde_update(&cur, &v, config.sigma, h, noise)?,
            Dynamics::MeanField => cur.iter().zip(&v).map(|(x, v)| x + v * h).collect(),
        };
        check_finite(&next, label, t_before)?;
        cur = cur.with_particles(next)?;
        clock.advance();
        let report = StepReport {
            t_before,
            t_after: clock.t,
            max_control_norm,
            stats_snapshot: EnsembleStats::from_ensemble(&cur)?,
        };
        on_step(&report, &cur);
        reports.push(report);
    }
    Ok((cur, reports))
}
