//! Renewable forecast errors as a mixed random variable: zero with
//! probability one half, otherwise the negative half of a zero-mean normal.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scenario::ScenarioConfig;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("standard deviation must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("covariance matrix is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),
}

/// Chebyshev multiplier √((1−ε)/ε).
pub fn z_factor(epsilon: f64) -> f64 {
    ((1.0 - epsilon) / epsilon).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ErrorMoments {
    /// Magnitude of the negative-component mean.
    pub mu: f64,
    /// Standard deviation of the negative component.
    pub delta: f64,
    /// Signed mean of the mixed variable, always ≤ 0.
    pub mean: f64,
    pub variance: f64,
}

impl ErrorMoments {
    /// Scale of the underlying symmetric normal.
    pub fn sigma(&self) -> f64 {
        self.mu / (2.0 / std::f64::consts::PI).sqrt()
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

pub fn moments_from_sigma(sigma: f64) -> Result<ErrorMoments, UncertaintyError> {
    if !(sigma >= 0.0) {
        return Err(UncertaintyError::NegativeSigma(sigma));
    }
    let pi = std::f64::consts::PI;
    let delta = sigma * ((pi - 2.0) / pi).sqrt();
    let mu = sigma * (2.0 / pi).sqrt();
    Ok(ErrorMoments { mu, delta, mean: -mu / 2.0, variance: delta * delta / 2.0 + mu * mu / 4.0 })
}

/// Mean row vector and covariance of all RES errors at one hour.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSliceMoments {
    pub m: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl TimeSliceMoments {
    /// ‖M‖∞, the magnitude of the initial π lower bound.
    pub fn mean_inf_norm(&self) -> f64 {
        self.m.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
    }
}

/// One RES's error moments over the whole horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMoments {
    pub mean_row: DVector<f64>,
    pub xi: DMatrix<f64>,
}

/// Diagonal covariance unless a correlation matrix is supplied.
pub fn build_time_slice(moms: &[ErrorMoments], correlation: Option<&DMatrix<f64>>) -> TimeSliceMoments {
    let n = moms.len();
    let m = DVector::from_iterator(n, moms.iter().map(|e| e.mean));
    let sd: Vec<f64> = moms.iter().map(|e| e.std_dev()).collect();
    let sigma = match correlation {
        None => DMatrix::from_diagonal(&DVector::from_iterator(n, moms.iter().map(|e| e.variance))),
        Some(c) => DMatrix::from_fn(n, n, |i, j| c[(i, j)] * sd[i] * sd[j]),
    };
    TimeSliceMoments { m, sigma }
}

pub fn build_horizon(moms: &[ErrorMoments]) -> HorizonMoments {
    let t = moms.len();
    HorizonMoments {
        mean_row: DVector::from_iterator(t, moms.iter().map(|e| e.mean)),
        xi: DMatrix::from_diagonal(&DVector::from_iterator(t, moms.iter().map(|e| e.variance))),
    }
}

/// R with RᵀR = S for a symmetric PSD S, so that ‖R x‖ = √(xᵀ S x).
/// Zero rows are dropped.
pub fn psd_factor(s: &DMatrix<f64>) -> Result<DMatrix<f64>, UncertaintyError> {
    let n = s.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || s[(i, j)] == 0.0));
    if is_diag {
        let min = (0..n).map(|i| s[(i, i)]).fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            return Err(UncertaintyError::NotPsd(min));
        }
        let rows: Vec<usize> = (0..n).filter(|&i| s[(i, i)] > 0.0).collect();
        let mut r = DMatrix::zeros(rows.len(), n);
        for (k, &i) in rows.iter().enumerate() {
            r[(k, i)] = s[(i, i)].sqrt();
        }
        return Ok(r);
    }
    let scale = s.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(1e-300);
    let eig = SymmetricEigen::new(s.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-9 * scale {
        return Err(UncertaintyError::NotPsd(min));
    }
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-12 * scale).collect();
    let mut r = DMatrix::zeros(keep.len(), n);
    for (row, &k) in keep.iter().enumerate() {
        let l = eig.eigenvalues[k].sqrt();
        for j in 0..n {
            r[(row, j)] = l * eig.eigenvectors[(j, k)];
        }
    }
    Ok(r)
}

/// All error moments of a scenario, with covariance factors precomputed.
#[derive(Clone, Debug)]
pub struct UncertaintyModel {
    /// `moments[r][t]`
    pub moments: Vec<Vec<ErrorMoments>>,
    pub slices: Vec<TimeSliceMoments>,
    pub slice_factors: Vec<DMatrix<f64>>,
    pub horizons: Vec<HorizonMoments>,
    pub horizon_factors: Vec<DMatrix<f64>>,
    correlation: Option<DMatrix<f64>>,
}

impl UncertaintyModel {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, UncertaintyError> {
        let moments = cfg
            .res
            .iter()
            .map(|r| r.forecast.iter().map(|&f| moments_from_sigma(r.sigma_rel * f)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let correlation = cfg.res_correlation.as_ref().map(|c| {
            let n = c.len();
            DMatrix::from_fn(n, n, |i, j| c[i][j])
        });
        Self::from_moments(moments, cfg.hours, correlation)
    }

    pub fn from_moments(
        moments: Vec<Vec<ErrorMoments>>,
        hours: usize,
        correlation: Option<DMatrix<f64>>,
    ) -> Result<Self, UncertaintyError> {
        let slices: Vec<TimeSliceMoments> = (0..hours)
            .map(|t| {
                let at_t: Vec<ErrorMoments> = moments.iter().map(|r| r[t]).collect();
                build_time_slice(&at_t, correlation.as_ref())
            })
            .collect();
        let slice_factors = slices.iter().map(|s| psd_factor(&s.sigma)).collect::<Result<Vec<_>, _>>()?;
        let horizons: Vec<HorizonMoments> = moments.iter().map(|r| build_horizon(r)).collect();
        let horizon_factors = horizons.iter().map(|h| psd_factor(&h.xi)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { moments, slices, slice_factors, horizons, horizon_factors, correlation })
    }

    pub fn n_res(&self) -> usize {
        self.moments.len()
    }

    pub fn hours(&self) -> usize {
        self.slices.len()
    }

    /// Initial π lower bound at hour t.
    pub fn pi_floor(&self, t: usize) -> f64 {
        -self.slices[t].mean_inf_norm()
    }

    /// A sampler for full error vectors ω^t that honours the correlation hook.
    pub fn sampler(&self, seed: u64) -> ErrorSampler {
        let chol = self.correlation.as_ref().map(|c| {
            let f = psd_factor(c).expect("validated correlation");
            f.transpose()
        });
        ErrorSampler { rng: ChaCha8Rng::seed_from_u64(seed), chol }
    }
}

/// Deterministic sampler of the mixed error law.
pub struct ErrorSampler {
    rng: ChaCha8Rng,
    chol: Option<DMatrix<f64>>,
}

impl ErrorSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), chol: None }
    }

    /// min(x, 0) with x ~ N(0, σ²).
    pub fn draw(&mut self, moms: &ErrorMoments) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        (moms.sigma() * z).min(0.0)
    }

    /// One realisation of ω^t across all RES.
    pub fn draw_slice(&mut self, moms: &[ErrorMoments]) -> Vec<f64> {
        let z: Vec<f64> = match &self.chol {
            Some(l) if l.nrows() == moms.len() => {
                let w: Vec<f64> = (0..l.ncols()).map(|_| self.rng.sample(StandardNormal)).collect();
                (l * DVector::from_vec(w)).iter().copied().collect()
            }
            _ => (0..moms.len()).map(|_| self.rng.sample(StandardNormal)).collect(),
        };
        moms.iter().zip(z).map(|(m, z)| (m.sigma() * z).min(0.0)).collect()
    }
}

/// Convenience single draw from a fresh seed.
pub fn sample_error(moms: &ErrorMoments, seed: u64) -> f64 {
    ErrorSampler::new(seed).draw(moms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moments_at_sigma_ten() {
        let m = moments_from_sigma(10.0).unwrap();
        assert_relative_eq!(m.delta, 6.028_102_749_890_869, max_relative = 1e-12);
        assert_relative_eq!(m.mu, 7.978_845_608_028_654, max_relative = 1e-12);
        assert_relative_eq!(m.mean, -3.989_422_804_014_327, max_relative = 1e-12);
        assert_relative_eq!(m.variance, 34.084_505_690_810_466, max_relative = 1e-12);
    }

    #[test]
    fn zero_sigma_is_deterministic() {
        let m = moments_from_sigma(0.0).unwrap();
        assert_eq!(m, ErrorMoments::default());
        let mut s = ErrorSampler::new(3);
        assert!((0..100).all(|_| s.draw(&m) == 0.0));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert_eq!(moments_from_sigma(-1.0), Err(UncertaintyError::NegativeSigma(-1.0)));
    }

    #[test]
    fn z_at_five_percent() {
        assert_relative_eq!(z_factor(0.05), 19f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(z_factor(0.5), 1.0);
    }

    #[test]
    fn time_slice_diagonal() {
        let a = moments_from_sigma(10.0).unwrap();
        let b = moments_from_sigma(5.0).unwrap();
        let s = build_time_slice(&[a, b], None);
        assert_relative_eq!(s.sigma[(0, 0)], 34.0845, epsilon = 1e-4);
        assert_relative_eq!(s.sigma[(1, 1)], 8.5211, epsilon = 1e-4);
        assert_eq!(s.sigma[(0, 1)], 0.0);
        assert_eq!(s.m[1], b.mean);
        let one = build_time_slice(&[a], None);
        assert_eq!((one.m.len(), one.sigma.shape()), (1, (1, 1)));
    }

    #[test]
    fn factor_reproduces_covariance() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = psd_factor(&c).unwrap();
        let back = r.transpose() * &r;
        assert!((back - c).abs().max() < 1e-12);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0, 9.0]));
        let r = psd_factor(&d).unwrap();
        assert_eq!(r.nrows(), 2);
        assert!((r.transpose() * &r - d).abs().max() < 1e-15);
    }

    #[test]
    fn non_psd_rejected() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_factor(&c), Err(UncertaintyError::NotPsd(_))));
    }

    #[test]
    fn sampler_is_reproducible() {
        let m = moments_from_sigma(7.0).unwrap();
        let a: Vec<f64> = {
            let mut s = ErrorSampler::new(42);
            (0..50).map(|_| s.draw(&m)).collect()
        };
        let b: Vec<f64> = {
            let mut s = ErrorSampler::new(42);
            (0..50).map(|_| s.draw(&m)).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x <= 0.0));
    }
}
