//! Spectral normalization via power iteration with a persistent direction
//! vector. One iteration per training step is run against the raw weight;
//! the resulting (u, v, sigma) enter the graph as fixed attributes so the
//! analytic gradient matches finite differences exactly.

use super::array::Array;

const SIGMA_FLOOR: f64 = 1e-12;

/// Result of estimating the top singular triplet of a matrix.
pub struct SpectralEstimate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
    /// Set when the sigma floor kicked in (degenerate, e.g. zero matrix).
    pub floored: bool,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = n.max(SIGMA_FLOOR);
    for v in x.iter_mut() {
        *v /= denom;
    }
    n
}

/// Runs `n_iters` power iterations on `w`, updating `u` in place, then
/// estimates v = normalize(W^T u) and sigma = u^T W v.
pub fn power_iterate(w: &Array, u: &mut [f64], n_iters: usize) -> SpectralEstimate {
    let (m, n) = w.dims2();
    assert_eq!(u.len(), m, "u state length {} for {m}x{n} matrix", u.len());
    let wd = w.data();
    let mut v = vec![0.0; n];
    let mat_t_vec = |u: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..m {
            let ur = u[r];
            if ur == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += wd[r * n + c] * ur;
            }
        }
    };
    let mat_vec = |v: &[f64], out: &mut [f64]| {
        for (r, o) in out.iter_mut().enumerate() {
            *o = wd[r * n..(r + 1) * n].iter().zip(v).map(|(&a, &b)| a * b).sum();
        }
    };
    for _ in 0..n_iters {
        mat_t_vec(u, &mut v);
        normalize(&mut v);
        mat_vec(&v, u);
        normalize(u);
    }
    mat_t_vec(u, &mut v);
    normalize(&mut v);
    let mut wu = vec![0.0; m];
    mat_vec(&v, &mut wu);
    let sigma: f64 = u.iter().zip(&wu).map(|(&a, &b)| a * b).sum();
    let floored = sigma < SIGMA_FLOOR;
    SpectralEstimate {
        u: u.to_vec(),
        v,
        sigma: sigma.max(SIGMA_FLOOR),
        floored,
    }
}

/// Deterministic initial direction for a fresh spectral-norm layer.
pub fn initial_u(rows: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut u);
    u
}
