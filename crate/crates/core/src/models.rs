//! Drift and observation models.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::StateVector;
use crate::linalg::symmetrize;
use crate::{Error, Result};

/// Parameters of `V(x) = (λ₁/2)(x₂ − 2 + βx₁²)² + (λ₂/2)(x₁⁴/2 − x₁²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWellParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
}

impl DoubleWellParams {
    /// `x₂` on the valley floor `x₂ = 2 − βx₁²`.
    pub fn parabola(&self, x1: f64) -> f64 {
        2.0 - self.beta * x1 * x1
    }

    fn check(x: &StateVector) -> Result<()> {
        if x.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn potential(&self, x: &StateVector) -> Result<f64> {
        Self::check(x)?;
        let (x1, x2) = (x[0], x[1]);
        let valley = x2 - self.parabola(x1);
        Ok(0.5 * self.lambda1 * valley * valley
            + 0.5 * self.lambda2 * (0.5 * x1.powi(4) - x1 * x1))
    }

    pub fn gradient(&self, x: &StateVector) -> Result<StateVector> {
        Self::check(x)?;
        let (x1, x2) = (x[0], x[1]);
        let valley = x2 - self.parabola(x1);
        Ok(DVector::from_vec(vec![
            self.lambda1 * valley * 2.0 * self.beta * x1 + self.lambda2 * (x1.powi(3) - x1),
            self.lambda1 * valley,
        ]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz63Params {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Self {
            a: 10.0,
            b: 28.0,
            c: 8.0 / 3.0,
        }
    }
}

/// The deterministic part `f` of `dX = f(X) dt + √(2σ) dW`.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftModel {
    Zero { dim: usize },
    Linear { f: DMatrix<f64>, b: DVector<f64> },
    DoubleWell(DoubleWellParams),
    Lorenz63(Lorenz63Params),
}

impl DriftModel {
    pub fn linear(f: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !f.is_square() || f.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: f.nrows(),
                actual: b.len(),
            });
        }
        Ok(Self::Linear { f, b })
    }

    pub fn lorenz63_default() -> Self {
        Self::Lorenz63(Lorenz63Params::default())
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Zero { dim } => *dim,
            Self::Linear { b, .. } => b.len(),
            Self::DoubleWell(_) => 2,
            Self::Lorenz63(_) => 3,
        }
    }

    /// `(F, b)` for affine drifts, `(0, 0)` for the zero drift.
    pub fn affine_parts(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match self {
            Self::Zero { dim } => Some((DMatrix::zeros(*dim, *dim), DVector::zeros(*dim))),
            Self::Linear { f, b } => Some((f.clone(), b.clone())),
            _ => None,
        }
    }

    pub fn eval(&self, x: &StateVector) -> Result<StateVector> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(match self {
            Self::Zero { dim } => DVector::zeros(*dim),
            Self::Linear { f, b } => f * x + b,
            Self::DoubleWell(p) => -p.gradient(x)?,
            Self::Lorenz63(p) => DVector::from_vec(vec![
                p.a * (x[1] - x[0]),
                x[0] * (p.b - x[2]) - x[1],
                x[0] * x[1] - p.c * x[2],
            ]),
        })
    }
}

impl DriftModel {
    /// Allocation-free [`DriftModel::eval`] on slices of length
    /// [`DriftModel::dim`], for tight loops that have checked dimensions.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert!(x.len() == self.dim() && out.len() == self.dim());
        match self {
            Self::Zero { .. } => out.fill(0.0),
            Self::Linear { f, b } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = b[i] + x.iter().enumerate().map(|(j, xj)| f[(i, j)] * xj).sum::<f64>();
                }
            }
            Self::DoubleWell(p) => {
                let valley = x[1] - p.parabola(x[0]);
                out[0] = -(p.lambda1 * valley * 2.0 * p.beta * x[0] + p.lambda2 * (x[0].powi(3) - x[0]));
                out[1] = -(p.lambda1 * valley);
            }
            Self::Lorenz63(p) => {
                out[0] = p.a * (x[1] - x[0]);
                out[1] = x[0] * (p.b - x[2]) - x[1];
                out[2] = x[0] * x[1] - p.c * x[2];
            }
        }
    }
}

pub fn eval_drift(model: &DriftModel, x: &StateVector) -> Result<StateVector> {
    model.eval(x)
}

pub fn double_well_potential(params: &DoubleWellParams, x: &StateVector) -> Result<f64> {
    params.potential(x)
}

/// Linear forward map `h(x) = Hx` with Gaussian noise `N(0, R)` and datum `y`.
///
/// `R` is validated by a Cholesky factorization at construction and its
/// inverse is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    y: DVector<f64>,
}

impl ObservationModel {
    pub fn new(h: DMatrix<f64>, mut r: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let dy = h.nrows();
        if r.nrows() != dy || r.ncols() != dy {
            return Err(Error::DimensionMismatch {
                expected: dy,
                actual: r.nrows(),
            });
        }
        if y.len() != dy {
            return Err(Error::DimensionMismatch {
                expected: dy,
                actual: y.len(),
            });
        }
        symmetrize(&mut r);
        let chol = r
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("observation noise covariance"))?;
        let mut r_inv = chol.inverse();
        symmetrize(&mut r_inv);
        Ok(Self { h, r, r_inv, y })
    }

    /// Scalar observation of one state component.
    pub fn observe_component(dim: usize, component: usize, r: f64, y: f64) -> Result<Self> {
        let mut h = DMatrix::zeros(1, dim);
        h[(0, component)] = 1.0;
        Self::new(h, DMatrix::from_element(1, 1, r), DVector::from_element(1, y))
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Same map and noise, new datum.
    pub fn with_observation(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim(),
                actual: y.len(),
            });
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Same map and datum with `R` multiplied by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.h.clone(), &self.r * factor, self.y.clone())
    }

    fn check(&self, x: &StateVector) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &StateVector) -> DVector<f64> {
        &self.h * x
    }

    pub fn residual(&self, x: &StateVector) -> DVector<f64> {
        &self.h * x - &self.y
    }

    /// `L(x) = ½ (Hx − y)ᵀ R⁻¹ (Hx − y)`
    pub fn neg_log_likelihood(&self, x: &StateVector) -> Result<f64> {
        self.check(x)?;
        let r = self.residual(x);
        Ok(0.5 * r.dot(&(&self.r_inv * &r)))
    }

    /// `∇L(x) = Hᵀ R⁻¹ (Hx − y)`
    pub fn grad_neg_log_likelihood(&self, x: &StateVector) -> Result<StateVector> {
        self.check(x)?;
        Ok(self.h.tr_mul(&(&self.r_inv * self.residual(x))))
    }

    /// The constant Hessian `Hᵀ R⁻¹ H` of `L`; its trace is `ΔL`.
    pub fn likelihood_hessian(&self) -> DMatrix<f64> {
        self.h.tr_mul(&self.r_inv) * &self.h
    }
}

/// Homotopy time `t ∈ [0, T]` advanced in steps of `dt`; the last step is
/// shortened when `T` is not a multiple of `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomotopyClock {
    pub t: f64,
    pub horizon: f64,
    pub dt: f64,
    step: usize,
}

impl HomotopyClock {
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon > 0.0) || !(dt > 0.0) || dt > horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "clock needs 0 < dt <= T, got dt = {dt}, T = {horizon}"
            )));
        }
        Ok(Self {
            t: 0.0,
            horizon,
            dt,
            step: 0,
        })
    }

    /// Clock frozen at `t` with nominal step `dt`, for evaluating control laws
    /// outside of a propagation loop.
    pub fn at(t: f64, horizon: f64, dt: f64) -> Result<Self> {
        let mut c = Self::new(horizon, dt)?;
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::InvalidParameter(format!("t = {t} outside [0, {horizon}]")));
        }
        c.t = t;
        Ok(c)
    }

    /// Number of steps needed to reach `T`.
    pub fn steps(&self) -> usize {
        let ratio = self.horizon / self.dt;
        let nearest = ratio.round();
        if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            ratio.ceil() as usize
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.steps()
    }

    /// Length of the step starting at the current time.
    pub fn current_step(&self) -> f64 {
        if self.step + 1 < self.steps() {
            self.dt
        } else {
            self.horizon - self.t
        }
    }

    fn time_at(&self, k: usize) -> f64 {
        if k >= self.steps() {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Moves to the next grid point and returns the step length taken.
    pub fn advance(&mut self) -> f64 {
        let h = self.current_step();
        self.step += 1;
        self.t = self.time_at(self.step);
        h
    }

    /// The clock with `dt` replaced by the length of the current step.
    pub fn with_current_step(&self) -> Self {
        Self {
            dt: self.current_step(),
            ..*self
        }
    }
}
