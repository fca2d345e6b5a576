//! Homotopy control laws.
//!
//! Particles follow `dX = f dt − (2σt/T) ∇L dt + ĝ_t(X) dt + √(2σ) dW`
//! where the control `ĝ_t` is the ensemble Kalman constant-gain
//! approximation built from two effective likelihood terms: the original
//! forward map `h` and the modified map
//! `h̃(x) = h(x − Δt f(x) + Δt (σt/T) ∇L(x))`. The normalization rate of the
//! homotopy density never appears explicitly: the centered residuals
//! `½(h(x) + π[h]) − y` keep the control mean-consistent on their own.
//!
//! The curvature correction `ΔL` is dropped, which is exact for the linear
//! forward maps implemented here.
//!
//! Closed forms for the linear special cases (zero drift, zero diffusion,
//! affine drift) are provided alongside the generic law; they double as
//! oracles for it.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{
    cross_covariance_of, default_score_regularization, mean_of, statistical_linearization,
    Ensemble, EnsembleStats, GaussianScore, StateVector,
};
use crate::linalg;
use crate::models::{DriftModel, HomotopyClock, ObservationModel};
use crate::{Error, Result};

/// How `∇L` is evaluated inside the control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientBackend {
    /// `Hᵀ R⁻¹ (Hx − y)` from the known forward map.
    #[default]
    Analytic,
    /// Jacobian of `h` replaced by its statistical linearization.
    Stein,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlOptions {
    pub gradient: GradientBackend,
    /// Ridge added to the covariance before inverting it; `None` selects
    /// `1e-8 · max(1, tr Σ / d)`.
    pub score_reg: Option<f64>,
}

/// Which drift field the particles follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlLaw {
    /// Plain model drift, no assimilation.
    Off,
    /// Generic constant-gain homotopy drift.
    ConstantGain,
    /// Closed form for `f = 0`.
    PureDiffusion,
    /// Expanded law for `σ = 0`.
    PureDrift,
    /// Mean-field ODE for affine `f`, with its own Gaussian score term.
    LinearGaussian,
}

impl ControlLaw {
    pub fn includes_score(self) -> bool {
        matches!(self, Self::LinearGaussian)
    }

    pub fn needs_context(self) -> bool {
        !matches!(self, Self::Off)
    }
}

impl ControlLaw {
    /// Statistics a context must carry for this law.
    pub fn requirements(self) -> Requirements {
        Requirements {
            modified_map: self == Self::ConstantGain,
            drift_moments: self == Self::PureDrift,
        }
    }
}

/// Optional groups of ensemble statistics. Skipped groups are filled with
/// NaN so that a law reading them fails loudly instead of silently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requirements {
    /// `h̃` values: `Σ^{xh̃}`, `π[h̃]` and the stacked covariance.
    pub modified_map: bool,
    /// `Σ^{xf}` and `π[f]`.
    pub drift_moments: bool,
}

impl Requirements {
    pub const ALL: Self = Self {
        modified_map: true,
        drift_moments: true,
    };
}

/// Ensemble statistics feeding one control evaluation. All entries must come
/// from the same ensemble snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMoments {
    pub stats: EnsembleStats,
    /// `Σ^{xh}`, `d_x × d_y`
    pub cross_xh: DMatrix<f64>,
    /// `Σ^{xh̃}`
    pub cross_xht: DMatrix<f64>,
    /// `Σ^{xf}`, `d_x × d_x`
    pub cross_xf: DMatrix<f64>,
    pub mean_h: DVector<f64>,
    pub mean_ht: DVector<f64>,
    pub mean_f: DVector<f64>,
    /// Covariance of the stacked vector `(h, h̃)`, `2d_y × 2d_y`.
    pub cov_stacked: DMatrix<f64>,
    /// Jacobian used for `∇L`, `d_y × d_x`.
    pub jacobian: DMatrix<f64>,
}

/// Frozen per-step state of the control: clock, models and moments, plus
/// gain matrices derived from them.
#[derive(Debug, Clone)]
pub struct ControlContext<'a> {
    clock: HomotopyClock,
    sigma: f64,
    obs: &'a ObservationModel,
    drift: &'a DriftModel,
    moments: ControlMoments,
    options: ControlOptions,
    score: OnceLock<std::result::Result<GaussianScore, Error>>,
    gain_h: DMatrix<f64>,
    gain_ht: DMatrix<f64>,
    diffusion_gain: OnceLock<DMatrix<f64>>,
    drift_gains: OnceLock<(DMatrix<f64>, DMatrix<f64>)>,
    linear_gains: OnceLock<std::result::Result<LinearGains, Error>>,
    members: Option<MemberValues>,
}

/// Per-particle values computed while building the statistics, reused when
/// the control is evaluated at the ensemble members themselves.
#[derive(Debug, Clone)]
struct MemberValues {
    f: Vec<StateVector>,
    grad: Vec<StateVector>,
    h: Vec<DVector<f64>>,
    ht: Vec<DVector<f64>>,
}

/// Per-context constant matrices of the affine-drift law.
#[derive(Debug, Clone)]
struct LinearGains {
    f: DMatrix<f64>,
    b: DVector<f64>,
    /// `{(1/T)Σ + (t/T)ΣFᵀ − (2σt²/T²)ΣHᵀR⁻¹H} HᵀR⁻¹`
    data: DMatrix<f64>,
    /// `(t/T) ΣHᵀR⁻¹H`
    coupling: DMatrix<f64>,
}

impl<'a> ControlContext<'a> {
    /// Computes every statistic from `ens`. `clock.dt` is the step that will
    /// be taken and is also the `Δt` inside `h̃`.
    pub fn from_ensemble(
        ens: &Ensemble,
        clock: HomotopyClock,
        sigma: f64,
        obs: &'a ObservationModel,
        drift: &'a DriftModel,
        options: ControlOptions,
    ) -> Result<Self> {
        Self::with_requirements(ens, clock, sigma, obs, drift, options, Requirements::ALL)
    }

    /// Like [`ControlContext::from_ensemble`] but computes only the
    /// statistics named in `needs`.
    pub fn with_requirements(
        ens: &Ensemble,
        clock: HomotopyClock,
        sigma: f64,
        obs: &'a ObservationModel,
        drift: &'a DriftModel,
        options: ControlOptions,
        needs: Requirements,
    ) -> Result<Self> {
        check_dims(ens.dim(), obs, drift)?;
        let stats = EnsembleStats::from_ensemble(ens)?;
        let xs = ens.particles();
        let (d, q) = (ens.dim(), obs.obs_dim());
        let hs: Vec<_> = xs.iter().map(|x| obs.forward(x)).collect();
        let fs = if needs.modified_map || needs.drift_moments {
            Some(xs.iter().map(|x| drift.eval(x)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let jacobian = match options.gradient {
            GradientBackend::Analytic => obs.h().clone(),
            GradientBackend::Stein => {
                let reg = options
                    .score_reg
                    .unwrap_or_else(|| default_score_regularization(&stats.cov));
                statistical_linearization(ens, &hs, reg)?
            }
        };
        let nan = |r: usize, c: usize| DMatrix::from_element(r, c, f64::NAN);
        let mut members = None;
        let (cross_xht, mean_ht, cov_stacked) = match (&fs, needs.modified_map) {
            (Some(fs), true) => {
                let shift = clock.dt * sigma * clock.t / clock.horizon;
                let grads: Vec<_> = xs.iter().map(|x| gradient_with(obs, &jacobian, x)).collect();
                let hts: Vec<_> = xs
                    .iter()
                    .zip(fs)
                    .zip(&grads)
                    .map(|((x, f), grad)| obs.forward(&(x - f * clock.dt + grad * shift)))
                    .collect();
                let stacked: Vec<_> = hs
                    .iter()
                    .zip(&hts)
                    .map(|(h, ht)| DVector::from_iterator(2 * q, h.iter().chain(ht.iter()).copied()))
                    .collect();
                let mut cov_stacked = cross_covariance_of(&stacked, &stacked)?;
                linalg::symmetrize(&mut cov_stacked);
                let out = (cross_covariance_of(xs, &hts)?, mean_of(&hts)?, cov_stacked);
                members = Some(MemberValues {
                    f: fs.clone(),
                    grad: grads,
                    h: hs.clone(),
                    ht: hts,
                });
                out
            }
            _ => (nan(d, q), DVector::from_element(q, f64::NAN), nan(2 * q, 2 * q)),
        };
        let (cross_xf, mean_f) = match (&fs, needs.drift_moments) {
            (Some(fs), true) => (cross_covariance_of(xs, fs)?, mean_of(fs)?),
            _ => (nan(d, d), DVector::from_element(d, f64::NAN)),
        };
        let moments = ControlMoments {
            cross_xh: cross_covariance_of(xs, &hs)?,
            cross_xht,
            cross_xf,
            mean_h: mean_of(&hs)?,
            mean_ht,
            mean_f,
            cov_stacked,
            jacobian,
            stats,
        };
        let mut ctx = Self::from_moments(moments, clock, sigma, obs, drift, options)?;
        ctx.members = members;
        Ok(ctx)
    }

    /// Context from externally supplied moments (for closed-form checks).
    pub fn from_moments(
        moments: ControlMoments,
        clock: HomotopyClock,
        sigma: f64,
        obs: &'a ObservationModel,
        drift: &'a DriftModel,
        options: ControlOptions,
    ) -> Result<Self> {
        check_dims(moments.stats.mean.len(), obs, drift)?;
        if !(sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
        }
        let (t, horizon, dt) = (clock.t, clock.horizon, clock.dt);
        let gain_h = &moments.cross_xh * obs.r_inv() * (-(t + dt) / (dt * horizon));
        let gain_ht = &moments.cross_xht * obs.r_inv() * (t / (dt * horizon));
        Ok(Self {
            clock,
            sigma,
            obs,
            drift,
            moments,
            options,
            score: OnceLock::new(),
            gain_h,
            gain_ht,
            diffusion_gain: OnceLock::new(),
            drift_gains: OnceLock::new(),
            linear_gains: OnceLock::new(),
            members: None,
        })
    }

    pub fn clock(&self) -> &HomotopyClock {
        &self.clock
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn obs(&self) -> &ObservationModel {
        self.obs
    }

    pub fn drift(&self) -> &DriftModel {
        self.drift
    }

    pub fn moments(&self) -> &ControlMoments {
        &self.moments
    }

    pub fn stats(&self) -> &EnsembleStats {
        &self.moments.stats
    }

    /// `∇L(x)` through the configured Jacobian.
    pub fn grad_l(&self, x: &StateVector) -> StateVector {
        gradient_with(self.obs, &self.moments.jacobian, x)
    }

    /// Gaussian approximation of `∇ log π_t^h(x)`.
    pub fn score(&self, x: &StateVector) -> Result<StateVector> {
        let score = self.score.get_or_init(|| {
            let reg = self
                .options
                .score_reg
                .unwrap_or_else(|| default_score_regularization(&self.moments.stats.cov));
            GaussianScore::new(&self.moments.stats, reg)
        });
        match score {
            Ok(s) => Ok(s.eval(x)),
            Err(e) => Err(e.clone()),
        }
    }

    /// Model drift at ensemble member `i`, when it was computed with the
    /// statistics.
    pub fn member_drift(&self, i: usize) -> Option<&StateVector> {
        self.members.as_ref().and_then(|m| m.f.get(i))
    }

    /// [`homotopy_total_drift`] at ensemble member `i` from cached values;
    /// `None` when the context was not built with the modified map.
    pub fn member_total_drift(&self, i: usize) -> Option<StateVector> {
        let m = self.members.as_ref()?;
        let y = self.obs.y();
        let mut out = m.f.get(i)?.clone();
        if self.sigma != 0.0 {
            out -= &m.grad[i] * (2.0 * self.sigma * self.time_ratio());
        }
        out += &self.gain_h * ((&m.h[i] + &self.moments.mean_h) * 0.5 - y);
        if self.clock.t != 0.0 {
            out += &self.gain_ht * ((&m.ht[i] + &self.moments.mean_ht) * 0.5 - y);
        }
        Some(out)
    }

    /// [`ControlContext::centered_residuals`] at ensemble member `i`.
    pub fn member_residuals(&self, i: usize) -> Option<(DVector<f64>, DVector<f64>)> {
        let m = self.members.as_ref()?;
        let y = self.obs.y();
        Some((
            (m.h.get(i)? + &self.moments.mean_h) * 0.5 - y,
            (&m.ht[i] + &self.moments.mean_ht) * 0.5 - y,
        ))
    }

    fn time_ratio(&self) -> f64 {
        self.clock.t / self.clock.horizon
    }

    /// `½(h(x) + π[h]) − y` and its `h̃` counterpart.
    pub fn centered_residuals(&self, x: &StateVector) -> Result<(DVector<f64>, DVector<f64>)> {
        let y = self.obs.y();
        let r_h = (self.obs.forward(x) + &self.moments.mean_h) * 0.5 - y;
        let r_ht = (modified_forward_map(self, x)? + &self.moments.mean_ht) * 0.5 - y;
        Ok((r_h, r_ht))
    }
}

fn check_dims(dim: usize, obs: &ObservationModel, drift: &DriftModel) -> Result<()> {
    for expected in [obs.state_dim(), drift.dim()] {
        if expected != dim {
            return Err(Error::DimensionMismatch {
                expected,
                actual: dim,
            });
        }
    }
    Ok(())
}

fn gradient_with(obs: &ObservationModel, jacobian: &DMatrix<f64>, x: &StateVector) -> StateVector {
    jacobian.tr_mul(&(obs.r_inv() * obs.residual(x)))
}

/// `h̃(x) = H(x − Δt f(x) + Δt (σt/T) ∇L(x))`
pub fn modified_forward_map(ctx: &ControlContext<'_>, x: &StateVector) -> Result<DVector<f64>> {
    let dt = ctx.clock.dt;
    let f = ctx.drift.eval(x)?;
    let shifted = x - f * dt + ctx.grad_l(x) * (dt * ctx.sigma * ctx.time_ratio());
    Ok(ctx.obs.forward(&shifted))
}

/// Constant-gain control
/// `ĝ(x) = −((t+Δt)/(ΔtT)) Σ^{xh} R⁻¹ (½(h(x)+π[h]) − y)
///        + (t/(ΔtT)) Σ^{xh̃} R⁻¹ (½(h̃(x)+π[h̃]) − y)`.
pub fn constant_gain_control(ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    let y = ctx.obs.y();
    let r_h = (ctx.obs.forward(x) + &ctx.moments.mean_h) * 0.5 - y;
    let mut g = &ctx.gain_h * r_h;
    if ctx.clock.t != 0.0 {
        let r_ht = (modified_forward_map(ctx, x)? + &ctx.moments.mean_ht) * 0.5 - y;
        g += &ctx.gain_ht * r_ht;
    }
    Ok(g)
}

/// `f(x) − (2σt/T) ∇L(x) + ĝ(x)`
pub fn homotopy_total_drift(ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    let mut out = ctx.drift.eval(x)?;
    if ctx.sigma != 0.0 {
        out -= ctx.grad_l(x) * (2.0 * ctx.sigma * ctx.time_ratio());
    }
    out += constant_gain_control(ctx, x)?;
    Ok(out)
}

/// `Ω(t) = (1/T) R⁻¹ − (2σt²/T²) R⁻¹ H Hᵀ R⁻¹`
pub fn omega_matrix(clock: &HomotopyClock, sigma: f64, obs: &ObservationModel) -> DMatrix<f64> {
    let ri = obs.r_inv();
    let (t, horizon) = (clock.t, clock.horizon);
    let hh = obs.h() * obs.h().transpose();
    let mut omega = ri / horizon - ri * hh * ri * (2.0 * sigma * t * t / (horizon * horizon));
    linalg::symmetrize(&mut omega);
    omega
}

/// Controlled drift for `f = 0`:
/// `−(2σt/T) Hᵀ R⁻¹ (Hx − y) − Σ Hᵀ Ω(t) (½H(x + μ) − y)`.
pub fn pure_diffusion_drift(
    clock: &HomotopyClock,
    sigma: f64,
    obs: &ObservationModel,
    stats: &EnsembleStats,
    x: &StateVector,
) -> Result<StateVector> {
    let grad = obs.grad_neg_log_likelihood(x)?;
    let omega = omega_matrix(clock, sigma, obs);
    let r = (obs.forward(&(x + &stats.mean))) * 0.5 - obs.y();
    Ok(-grad * (2.0 * sigma * clock.t / clock.horizon) - &stats.cov * obs.h().tr_mul(&(omega * r)))
}

/// [`pure_diffusion_drift`] with the context's statistics and a cached gain.
pub fn pure_diffusion_control_drift(ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    let obs = ctx.obs;
    let gain = ctx.diffusion_gain.get_or_init(|| {
        let omega = omega_matrix(&ctx.clock, ctx.sigma, obs);
        &ctx.moments.stats.cov * obs.h().transpose() * omega
    });
    let grad = obs.grad_neg_log_likelihood(x)?;
    let r = obs.forward(&(x + &ctx.moments.stats.mean)) * 0.5 - obs.y();
    Ok(-grad * (2.0 * ctx.sigma * ctx.time_ratio()) - gain * r)
}

/// Controlled drift for `σ = 0` with the `O(Δt)` terms removed:
/// `f(x) − (1/T)(Σ + tΣ^{xf}) Hᵀ R⁻¹ (½H(x+μ) − y) − (t/2T) Σ Hᵀ R⁻¹ H (f(x) + π[f])`.
pub fn pure_drift_control_drift(ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    let (t, horizon) = (ctx.clock.t, ctx.clock.horizon);
    let obs = ctx.obs;
    let m = &ctx.moments;
    let (data_gain, coupling) = ctx.drift_gains.get_or_init(|| {
        let ht_ri = obs.h().transpose() * obs.r_inv();
        let data_gain = (&m.stats.cov + &m.cross_xf * t) * &ht_ri / horizon;
        let coupling = &m.stats.cov * ht_ri * obs.h() * (t / (2.0 * horizon));
        (data_gain, coupling)
    });
    let f = ctx.drift.eval(x)?;
    let r = obs.forward(&(x + &m.stats.mean)) * 0.5 - obs.y();
    Ok(&f - data_gain * r - coupling * (&f + &m.mean_f))
}

impl ControlContext<'_> {
    fn linear_gains(&self) -> Result<&LinearGains> {
        let cached = self.linear_gains.get_or_init(|| {
            let (f, b) = self
                .drift
                .affine_parts()
                .ok_or_else(|| Error::InvalidParameter("linear gain expansion needs an affine drift".into()))?;
            let (t, horizon, sigma) = (self.clock.t, self.clock.horizon, self.sigma);
            let obs = self.obs;
            let cov = &self.moments.stats.cov;
            let hess = obs.likelihood_hessian();
            let bracket = cov / horizon + cov * f.transpose() * (t / horizon)
                - cov * &hess * (2.0 * sigma * t * t / (horizon * horizon));
            Ok(LinearGains {
                data: bracket * obs.h().transpose() * obs.r_inv(),
                coupling: cov * hess * (t / horizon),
                f,
                b,
            })
        });
        cached.as_ref().map_err(Clone::clone)
    }
}

/// The gain part of the affine-drift law with `O(Δt)` terms dropped:
/// `−{(1/T)Σ + (t/T)ΣFᵀ − (2σt²/T²)ΣHᵀR⁻¹H} HᵀR⁻¹ (½H(x+μ) − y)
///  − (t/T) ΣHᵀR⁻¹H (½F(x+μ) + b)`.
pub fn linear_gain_expansion(ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    let g = ctx.linear_gains()?;
    let mid_x = x + &ctx.moments.stats.mean;
    let r = ctx.obs.forward(&mid_x) * 0.5 - ctx.obs.y();
    let mid = (&g.f * mid_x) * 0.5 + &g.b;
    Ok(-(&g.data * r) - &g.coupling * mid)
}

/// Mean-field ODE drift for `f(x) = Fx + b`:
/// `Fx + b + σΣ⁻¹(x − μ) − (2σt/T)HᵀR⁻¹(Hx − y) + linear_gain_expansion`.
pub fn linear_gaussian_control_drift(ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    let f = ctx.drift.eval(x)?;
    let score = ctx.score(x)?;
    let grad = ctx.obs.grad_neg_log_likelihood(x)?;
    Ok(f - score * ctx.sigma - grad * (2.0 * ctx.sigma * ctx.time_ratio())
        + linear_gain_expansion(ctx, x)?)
}

/// Drift of `law` at `x`; `ctx` is ignored for [`ControlLaw::Off`].
pub fn law_drift(law: ControlLaw, ctx: &ControlContext<'_>, x: &StateVector) -> Result<StateVector> {
    match law {
        ControlLaw::Off => ctx.drift.eval(x),
        ControlLaw::ConstantGain => homotopy_total_drift(ctx, x),
        ControlLaw::PureDiffusion => pure_diffusion_control_drift(ctx, x),
        ControlLaw::PureDrift => pure_drift_control_drift(ctx, x),
        ControlLaw::LinearGaussian => linear_gaussian_control_drift(ctx, x),
    }
}
