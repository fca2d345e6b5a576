//! Reference methods: exact Gaussian moment propagation and Kalman analysis
//! (the oracles for linear scenarios), a deterministic ensemble square-root
//! filter, and bootstrap particle filter weight diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{Ensemble, EnsembleStats, GaussianBelief, StateVector};
use crate::linalg::{self, symmetrize};
use crate::models::ObservationModel;
use crate::{Error, Result};

/// How the linear moment ODEs are integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentBackend {
    /// Forward Euler with the given step; carries the same `O(dt)` bias as
    /// the particle integrators.
    #[default]
    Euler,
    /// Matrix exponentials (Van Loan block form); `dt` is ignored.
    Exact,
}

/// Moments of `dX = (FX + b) dt + √(2σ) dW` after time `T`:
/// `dμ/dt = Fμ + b`, `dΣ/dt = FΣ + ΣFᵀ + 2σI`.
pub fn gaussian_moment_propagation(
    belief: &GaussianBelief,
    f: &DMatrix<f64>,
    b: &DVector<f64>,
    sigma: f64,
    horizon: f64,
    dt: f64,
    backend: MomentBackend,
) -> Result<GaussianBelief> {
    let d = belief.dim();
    if f.shape() != (d, d) || b.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: b.len(),
        });
    }
    if !(horizon >= 0.0) {
        return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {horizon}")));
    }
    let noise = DMatrix::identity(d, d) * (2.0 * sigma);
    match backend {
        MomentBackend::Euler => {
            if !(dt > 0.0) {
                return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
            }
            let mut mu = belief.mean.clone();
            let mut cov = belief.cov.clone();
            let mut t = 0.0;
            while t < horizon {
                let h = dt.min(horizon - t);
                let dcov = f * &cov + &cov * f.transpose() + &noise;
                mu += (f * &mu + b) * h;
                cov += dcov * h;
                t += h;
                if horizon - t <= 1e-12 * horizon {
                    break;
                }
            }
            GaussianBelief::new(mu, cov)
        }
        MomentBackend::Exact => {
            // Mean: exp of [[F, b], [0, 0]]·T acting on (μ, 1).
            let mut aug = DMatrix::zeros(d + 1, d + 1);
            aug.view_mut((0, 0), (d, d)).copy_from(f);
            aug.view_mut((0, d), (d, 1)).copy_from(b);
            let e = (aug * horizon).exp();
            let mu = e.view((0, 0), (d, d)) * &belief.mean + e.view((0, d), (d, 1));

            // Covariance: exp of [[−F, Q], [0, Fᵀ]]·T gives Φ = E₂₂ᵀ and the
            // accumulated noise Φ·E₁₂.
            let mut vl = DMatrix::zeros(2 * d, 2 * d);
            vl.view_mut((0, 0), (d, d)).copy_from(&(-f));
            vl.view_mut((0, d), (d, d)).copy_from(&noise);
            vl.view_mut((d, d), (d, d)).copy_from(&f.transpose());
            let g = (vl * horizon).exp();
            let phi = g.view((d, d), (d, d)).transpose();
            let q = &phi * g.view((0, d), (d, d));
            let cov = &phi * &belief.cov * phi.transpose() + q;
            GaussianBelief::new(mu.column(0).into_owned(), cov)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanResult {
    pub posterior: GaussianBelief,
    /// `d_x × d_y`
    pub gain: DMatrix<f64>,
    /// `y − Hμ`
    pub innovation: DVector<f64>,
}

/// Exact linear-Gaussian update, Joseph form for the covariance.
pub fn kalman_analysis(prior: &GaussianBelief, obs: &ObservationModel) -> Result<KalmanResult> {
    if prior.dim() != obs.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.state_dim(),
            actual: prior.dim(),
        });
    }
    let h = obs.h();
    let pht = &prior.cov * h.transpose();
    let mut s = h * &pht + obs.r();
    symmetrize(&mut s);
    let gain = linalg::solve(&s, &pht.transpose(), "innovation covariance")?.transpose();
    let innovation = obs.y() - h * &prior.mean;
    let mean = &prior.mean + &gain * &innovation;
    let d = prior.dim();
    let i_kh = DMatrix::identity(d, d) - &gain * h;
    let cov = &i_kh * &prior.cov * i_kh.transpose() + &gain * obs.r() * gain.transpose();
    Ok(KalmanResult {
        posterior: GaussianBelief::new(mean, cov)?,
        gain,
        innovation,
    })
}

/// Ensemble transform square-root update with the symmetric square root.
/// For linear `h` the analysis sample mean and covariance equal the Kalman
/// update of the forecast sample statistics.
pub fn esrf_analysis(ens: &Ensemble, obs: &ObservationModel) -> Result<Ensemble> {
    let m = ens.len();
    if m < 2 {
        return Err(Error::TooFewParticles { required: 2, actual: m });
    }
    if ens.dim() != obs.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.state_dim(),
            actual: ens.dim(),
        });
    }
    let stats = EnsembleStats::from_ensemble(ens)?;
    let d = ens.dim();
    let anomalies = DMatrix::from_fn(d, m, |i, j| ens.particles()[j][i] - stats.mean[i]);
    let scale = 1.0 / (m as f64 - 1.0);
    let y_anom = obs.h() * &anomalies;
    let ryt = obs.r_inv() * &y_anom;
    let mut g = DMatrix::identity(m, m) + y_anom.tr_mul(&ryt) * scale;
    symmetrize(&mut g);
    let innovation = obs.y() - obs.forward(&stats.mean);
    let rhs = ryt.tr_mul(&innovation) * scale;
    let w_mean = linalg::solve(&g, &DMatrix::from_column_slice(m, 1, rhs.as_slice()), "ensemble transform")?;
    let transform = linalg::psd_sqrt(&g, true)?;
    let mean = &stats.mean + &anomalies * w_mean.column(0);
    let updated = anomalies * transform;
    ens.with_particles(
        (0..m)
            .map(|j| &mean + updated.column(j))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfDiagnostics {
    pub weights: Vec<f64>,
    pub ess: f64,
}

/// Importance weights `∝ exp(−L(x_i))` of the ensemble and their effective
/// sample size `1/Σw²`.
pub fn bootstrap_pf_diagnostics(ens: &Ensemble, obs: &ObservationModel) -> Result<PfDiagnostics> {
    let log_w = ens
        .iter()
        .map(|x| obs.neg_log_likelihood(x).map(|l| -l))
        .collect::<Result<Vec<_>>>()?;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights(ens.len()));
    }
    let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let weights: Vec<f64> = unnorm.iter().map(|w| w / total).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(PfDiagnostics { weights, ess })
}

/// `√(Σ‖μ̂_n − x_n‖² / (d·N))`
pub fn rmse(estimates: &[StateVector], truth: &[StateVector]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: estimates.len(),
        });
    }
    let first = truth.first().ok_or(Error::EmptyEnsemble)?;
    let d = first.len();
    let mut sum = 0.0;
    for (e, x) in estimates.iter().zip(truth) {
        if e.len() != d || x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: if e.len() != d { e.len() } else { x.len() },
            });
        }
        sum += (e - x).norm_squared();
    }
    Ok((sum / (d * truth.len()) as f64).sqrt())
}
