//! Particle storage and the empirical statistics consumed by the control laws.
//!
//! Expectations are taken under the empirical measure with equal weights
//! `1/M`. Covariances use the unbiased divisor `M - 1` and are symmetrized
//! before they are handed to any solve or eigen-decomposition. All
//! reductions run left to right over particle index, so results do not
//! depend on how particle updates were scheduled.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::integrators::RngStream;
use crate::linalg::{self, symmetrize};
use crate::{Error, Result};

pub type StateVector = DVector<f64>;

/// `M` particles of common dimension `d_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: Vec<StateVector>,
    dim: usize,
}

impl Ensemble {
    pub fn new(particles: Vec<StateVector>) -> Result<Self> {
        let dim = particles.first().ok_or(Error::EmptyEnsemble)?.len();
        for p in &particles {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: p.len(),
                });
            }
        }
        Ok(Self { particles, dim })
    }

    /// Builds an ensemble from plain rows, one row per particle.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| DVector::from_column_slice(r)).collect())
    }

    /// Draws `m` particles from `belief` using the initial-condition stream of `seed`.
    pub fn sample_gaussian(belief: &GaussianBelief, m: usize, seed: u64) -> Result<Self> {
        let root = linalg::psd_sqrt(&belief.cov, false)?;
        let mut rng = RngStream::initial_conditions(seed);
        let d = belief.dim();
        let particles = (0..m)
            .map(|_| {
                let xi = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                &belief.mean + &root * xi
            })
            .collect();
        Self::new(particles)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particles(&self) -> &[StateVector] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [StateVector] {
        &mut self.particles
    }

    pub fn into_particles(self) -> Vec<StateVector> {
        self.particles
    }

    pub fn iter(&self) -> std::slice::Iter<'_, StateVector> {
        self.particles.iter()
    }

    /// Replaces the particles, keeping the dimension check.
    pub fn with_particles(&self, particles: Vec<StateVector>) -> Result<Self> {
        let out = Self::new(particles)?;
        if out.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: out.dim,
            });
        }
        Ok(out)
    }

    /// Applies `map` to every particle, in particle order.
    pub fn map_values<F>(&self, map: F) -> Vec<DVector<f64>>
    where
        F: Fn(&StateVector) -> DVector<f64>,
    {
        self.particles.iter().map(map).collect()
    }
}

/// Ensemble mean and covariance frozen at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: StateVector,
    pub cov: DMatrix<f64>,
}

impl EnsembleStats {
    pub fn from_ensemble(ens: &Ensemble) -> Result<Self> {
        Ok(Self {
            mean: ensemble_mean(ens)?,
            cov: ensemble_covariance(ens)?,
        })
    }
}

/// Gaussian density `N(mean, cov)`, used for oracles and initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: StateVector,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: StateVector, mut cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        symmetrize(&mut cov);
        let eig = cov.clone().symmetric_eigen();
        let tol = 1e-12 * cov.trace().abs().max(1e-300);
        if eig.eigenvalues.iter().any(|&l| l < -tol) {
            return Err(Error::NotPositiveDefinite("belief covariance"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn mean_of(values: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = values.first().ok_or(Error::EmptyEnsemble)?;
    let mut acc = DVector::zeros(first.len());
    for v in values {
        if v.len() != first.len() {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: v.len(),
            });
        }
        acc += v;
    }
    Ok(acc / values.len() as f64)
}

pub fn ensemble_mean(ens: &Ensemble) -> Result<StateVector> {
    mean_of(ens.particles())
}

/// `(1/(M-1)) Σ_i (x_i - x̄)(v_i - v̄)ᵀ` for aligned sequences.
pub fn cross_covariance_of(xs: &[DVector<f64>], vs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if xs.len() != vs.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: vs.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewParticles {
            required: 2,
            actual: xs.len(),
        });
    }
    let xm = mean_of(xs)?;
    let vm = mean_of(vs)?;
    let (dx, dv) = (xm.len(), vm.len());
    let mut c = DMatrix::zeros(dx, dv);
    for (x, v) in xs.iter().zip(vs) {
        for j in 0..dv {
            let vj = v[j] - vm[j];
            for i in 0..dx {
                c[(i, j)] += (x[i] - xm[i]) * vj;
            }
        }
    }
    Ok(c / (xs.len() - 1) as f64)
}

pub fn ensemble_covariance(ens: &Ensemble) -> Result<DMatrix<f64>> {
    let mut c = cross_covariance_of(ens.particles(), ens.particles())?;
    symmetrize(&mut c);
    Ok(c)
}

/// Covariance between the particles and per-particle `values` (e.g. `h(x_i)`).
pub fn cross_covariance(ens: &Ensemble, values: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    cross_covariance_of(ens.particles(), values)
}

/// Default score regularization `1e-8 · max(1, tr(Σ)/d)`.
pub fn default_score_regularization(cov: &DMatrix<f64>) -> f64 {
    let d = cov.nrows().max(1) as f64;
    1e-8 * (cov.trace() / d).max(1.0)
}

/// Precomputed Gaussian approximation of `∇ log π` for one statistics snapshot.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    mean: StateVector,
    precision: DMatrix<f64>,
}

impl GaussianScore {
    pub fn new(stats: &EnsembleStats, reg: f64) -> Result<Self> {
        let d = stats.mean.len();
        let regularized = &stats.cov + DMatrix::identity(d, d) * reg;
        let precision = linalg::symmetric_inverse(&regularized, "gaussian score")?;
        Ok(Self {
            mean: stats.mean.clone(),
            precision,
        })
    }

    /// `-(Σ + reg·I)⁻¹ (x - μ)`
    pub fn eval(&self, x: &StateVector) -> StateVector {
        -(&self.precision * (x - &self.mean))
    }
}

pub fn gaussian_score(stats: &EnsembleStats, x: &StateVector, reg: f64) -> Result<StateVector> {
    if x.len() != stats.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.mean.len(),
            actual: x.len(),
        });
    }
    Ok(GaussianScore::new(stats, reg)?.eval(x))
}

/// Ensemble estimate of the Jacobian of the map that produced `values`,
/// `((Σˣˣ + reg·I)⁻¹ Σˣᵛ)ᵀ`, in `d_y × d_x` orientation.
pub fn statistical_linearization(
    ens: &Ensemble,
    values: &[DVector<f64>],
    reg: f64,
) -> Result<DMatrix<f64>> {
    let cxx = ensemble_covariance(ens)?;
    let cxv = cross_covariance(ens, values)?;
    let d = ens.dim();
    let regularized = cxx + DMatrix::identity(d, d) * reg;
    let sol = linalg::solve(&regularized, &cxv, "statistical linearization")?;
    Ok(sol.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::RngStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn seeded(m: usize, d: usize, seed: u64) -> Ensemble {
        let mut rng = RngStream::new(seed, 0);
        Ensemble::new(
            (0..m)
                .map(|_| DVector::from_fn(d, |i, _| (i as f64 + 1.0) * rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        )
        .unwrap()
    }

    // Double loop over explicit indices; deliberately shares nothing with
    // `cross_covariance_of`.
    fn brute_cov(xs: &[DVector<f64>], vs: &[DVector<f64>]) -> DMatrix<f64> {
        let m = xs.len();
        let (dx, dv) = (xs[0].len(), vs[0].len());
        let mut out = DMatrix::zeros(dx, dv);
        for i in 0..dx {
            for j in 0..dv {
                let mx: f64 = xs.iter().map(|x| x[i]).sum::<f64>() / m as f64;
                let mv: f64 = vs.iter().map(|v| v[j]).sum::<f64>() / m as f64;
                let mut s = 0.0;
                for k in 0..m {
                    s += (xs[k][i] - mx) * (vs[k][j] - mv);
                }
                out[(i, j)] = s / (m as f64 - 1.0);
            }
        }
        out
    }

    #[test]
    fn mean_of_identical_particles() {
        let ens = Ensemble::from_rows(&[vec![1.0, 3.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(ensemble_mean(&ens).unwrap(), DVector::from_vec(vec![1.0, 3.0]));
    }

    #[test]
    fn mean_of_symmetric_points() {
        let ens = Ensemble::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(ensemble_mean(&ens).unwrap()[0], 1.0);
    }

    #[test]
    fn mean_matches_streaming_sum() {
        let ens = seeded(100, 1, 11);
        let mut total = 0.0;
        let mut count = 0.0;
        for p in ens.iter() {
            count += 1.0;
            total += (p[0] - total) / count;
        }
        assert_relative_eq!(ensemble_mean(&ens).unwrap()[0], total, epsilon = 1e-12);
    }

    #[test]
    fn empty_and_ragged_ensembles_rejected() {
        assert_eq!(Ensemble::new(vec![]), Err(Error::EmptyEnsemble));
        assert!(matches!(
            Ensemble::from_rows(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn covariance_edge_cases() {
        let same = Ensemble::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(ensemble_covariance(&same).unwrap(), DMatrix::zeros(2, 2));
        let pair = Ensemble::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(ensemble_covariance(&pair).unwrap()[(0, 0)], 2.0);
        let single = Ensemble::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            ensemble_covariance(&single),
            Err(Error::TooFewParticles { .. })
        ));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let ens = seeded(57, 3, 5);
        let c = ensemble_covariance(&ens).unwrap();
        let o = brute_cov(ens.particles(), ens.particles());
        assert!((c - o).amax() < 1e-12);
    }

    #[test]
    fn cross_covariance_of_lorenz_drift_matches_double_loop() {
        let ens = seeded(40, 3, 9);
        let f = crate::models::DriftModel::lorenz63_default();
        let vals: Vec<_> = ens.iter().map(|x| f.eval(x).unwrap()).collect();
        let c = cross_covariance(&ens, &vals).unwrap();
        let o = brute_cov(ens.particles(), &vals);
        assert!((&c - &o).amax() <= 1e-12 * o.amax().max(1.0));
    }

    #[test]
    fn cross_covariance_edge_cases() {
        let ens = seeded(10, 2, 1);
        let consts = vec![DVector::from_vec(vec![4.0]); 10];
        assert_eq!(cross_covariance(&ens, &consts).unwrap(), DMatrix::zeros(2, 1));
        assert!(matches!(
            cross_covariance(&ens, &consts[..9]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn score_cases() {
        let stats = EnsembleStats {
            mean: DVector::from_vec(vec![0.3]),
            cov: DMatrix::from_element(1, 1, 2.0),
        };
        assert_eq!(gaussian_score(&stats, &stats.mean, 0.0).unwrap()[0], 0.0);
        let x = DVector::from_vec(vec![1.3]);
        assert_relative_eq!(gaussian_score(&stats, &x, 0.0).unwrap()[0], -0.5, epsilon = 1e-15);

        let ens = Ensemble::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        let stats = EnsembleStats::from_ensemble(&ens).unwrap();
        let x = DVector::from_vec(vec![1.5, 1.0]);
        let s = gaussian_score(&stats, &x, 1e-8).unwrap();
        let expected = -(&x - &stats.mean) / 1e-8;
        assert!((s - expected).amax() < 1e-6);

        let singular = EnsembleStats {
            mean: DVector::zeros(2),
            cov: DMatrix::zeros(2, 2),
        };
        assert!(matches!(
            gaussian_score(&singular, &x, 0.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn stein_recovers_linear_map() {
        let ens = seeded(200, 3, 3);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let vals = ens.map_values(|x| &h * x);
        let j = statistical_linearization(&ens, &vals, 0.0).unwrap();
        assert!((j - &h).amax() < 1e-8);

        let consts = vec![DVector::from_vec(vec![1.0]); 200];
        let j = statistical_linearization(&ens, &consts, 0.0).unwrap();
        assert_eq!(j, DMatrix::zeros(1, 3));
    }

    #[test]
    fn stein_square_map_gaussian_limit() {
        // For x ~ N(m, s²), E[∇x²] = 2m; Stein's identity makes the
        // covariance ratio an unbiased estimate of it.
        let m = 0.7;
        let belief = GaussianBelief::new(DVector::from_vec(vec![m]), DMatrix::from_element(1, 1, 0.25)).unwrap();
        let ens = Ensemble::sample_gaussian(&belief, 100_000, 4).unwrap();
        let vals = ens.map_values(|x| DVector::from_vec(vec![x[0] * x[0]]));
        let j = statistical_linearization(&ens, &vals, 0.0).unwrap();
        assert!((j[(0, 0)] - 2.0 * m).abs() < 0.02, "{}", j[(0, 0)]);
    }

    proptest! {
        #[test]
        fn linear_stein_identity_exact(seed in 0u64..500, h in prop::collection::vec(-3.0f64..3.0, 6)) {
            let ens = seeded(12, 3, seed);
            let hm = DMatrix::from_row_slice(2, 3, &h);
            let vals = ens.map_values(|x| &hm * x);
            let lhs = cross_covariance(&ens, &vals).unwrap();
            let rhs = ensemble_covariance(&ens).unwrap() * hm.transpose();
            prop_assert!((&lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0));
        }

        #[test]
        fn covariance_is_psd(seed in 0u64..500, m in 2usize..20) {
            let ens = seeded(m, 3, seed);
            let c = ensemble_covariance(&ens).unwrap();
            prop_assert_eq!(&c, &c.transpose());
            let eig = c.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * c.trace()));
        }

        #[test]
        fn statistics_permutation_invariant(seed in 0u64..200, shift in 1usize..11) {
            let ens = seeded(11, 2, seed);
            let mut rotated = ens.particles().to_vec();
            rotated.rotate_left(shift);
            let other = Ensemble::new(rotated).unwrap();
            let a = EnsembleStats::from_ensemble(&ens).unwrap();
            let b = EnsembleStats::from_ensemble(&other).unwrap();
            prop_assert!((&a.mean - &b.mean).amax() < 1e-14);
            prop_assert!((&a.cov - &b.cov).amax() < 1e-14);
        }
    }
}
