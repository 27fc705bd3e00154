//! Gaussian-process machinery for the synthetic EHR generator: exact
//! Matern-3/2 draws via Cholesky factorization and random-Fourier-feature
//! approximations of an RBF-kernel random function.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("times must be strictly increasing")]
    TimesNotIncreasing,
    #[error("lengthscale and variance must be positive")]
    BadKernelParams,
    #[error("covariance factorization failed even with jitter {0}")]
    FactorizationFailed(f64),
}

/// Matern-3/2 covariance between two time points.
pub fn matern32(r: f64, lengthscale: f64, variance: f64) -> f64 {
    let a = 3f64.sqrt() * r.abs() / lengthscale;
    variance * (1.0 + a) * (-a).exp()
}

/// Lower-triangular Cholesky factor (row-major, n x n). Returns None if the
/// matrix is not numerically positive definite.
fn cholesky(mat: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = mat[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Exact draw from a Matern-3/2 GP at the given times. Jitter starts at 1e-8
/// and escalates a few decades before giving up.
pub fn sample_gp_matern(
    times: &[f64],
    lengthscale: f64,
    variance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, GpError> {
    if lengthscale <= 0.0 || variance <= 0.0 {
        return Err(GpError::BadKernelParams);
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GpError::TimesNotIncreasing);
    }
    let n = times.len();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = matern32(times[i] - times[j], lengthscale, variance);
        }
    }
    let mut jitter = 1e-8;
    let l = loop {
        let mut jittered = cov.clone();
        for i in 0..n {
            jittered[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&jittered, n) {
            break l;
        }
        jitter *= 10.0;
        if jitter > 1e-2 {
            return Err(GpError::FactorizationFailed(jitter));
        }
    };
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = l[i * n..i * n + i + 1]
            .iter()
            .zip(&z)
            .map(|(&a, &b)| a * b)
            .sum();
    }
    Ok(out)
}

/// Random function drawn from an RBF-kernel GP prior via random Fourier
/// features: f(x) = w . phi(x), phi_k(x) = sqrt(2/D) cos(omega_k . x + b_k),
/// omega ~ N(0, I/lengthscale^2), b ~ U[0, 2pi), w ~ N(0, I).
#[derive(Clone, Debug)]
pub struct RffFunction {
    omegas: Vec<Vec<f64>>,
    phases: Vec<f64>,
    weights: Vec<f64>,
    d_in: usize,
}

impl RffFunction {
    pub fn sample(d_in: usize, feature_count: usize, lengthscale: f64, rng: &mut impl Rng) -> Self {
        assert!(feature_count >= 1 && d_in >= 1);
        let omegas = (0..feature_count)
            .map(|_| {
                (0..d_in)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z / lengthscale
                    })
                    .collect()
            })
            .collect();
        let phases = (0..feature_count)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let weights = (0..feature_count).map(|_| StandardNormal.sample(rng)).collect();
        RffFunction { omegas, phases, weights, d_in }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d_in);
        let scale = (2.0 / self.omegas.len() as f64).sqrt();
        self.omegas
            .iter()
            .zip(&self.phases)
            .map(|(omega, &b)| {
                let proj: f64 = omega.iter().zip(x).map(|(&o, &xi)| o * xi).sum();
                scale * (proj + b).cos()
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.features(x)
            .iter()
            .zip(&self.weights)
            .map(|(&p, &w)| p * w)
            .sum()
    }
}
