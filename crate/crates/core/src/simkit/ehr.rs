//! Synthetic EHR-style cohort: smooth Gaussian-process covariates, untreated
//! outcomes mixing an endogenous spline trend, a per-patient GP and a random
//! function of the covariates, confounded binary treatments, and additive
//! treatment effects with inverse-square recency weights.
//!
//! The same replay engine drives both generation and counterfactual rollouts,
//! so a factual plan reproduces the recorded outcomes bit-exactly.

use super::bspline::{bspline_basis, open_uniform_knots};
use super::gp::{matern32, RffFunction};
use super::rng::{substream, unit_substream};
use super::trajectory::{Cohort, CohortMeta, SimState, Trajectory};
use super::SimError;
use crate::diffcore::stable_sigmoid;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct EhrConfig {
    pub n_units: usize,
    pub max_len: usize,
    pub min_len: usize,
    /// Observed covariate count (independent Matern GPs over time).
    pub d_x: usize,
    /// Generated outcome processes; only outcome 0 is exported as y, the
    /// rest feed the assignment mechanism.
    pub d_y: usize,
    /// Binary treatments; the exported code is their base-2 packing.
    pub d_a: usize,
    pub alpha_spline: Vec<f64>,
    pub alpha_gp: Vec<f64>,
    pub alpha_rff: Vec<f64>,
    /// Kernel of the per-patient outcome GPs.
    pub gp_lengthscale: f64,
    pub gp_variance: f64,
    /// Kernel of the covariate GPs.
    pub cov_lengthscale: f64,
    pub cov_variance: f64,
    pub rff_features: usize,
    pub rff_lengthscale: f64,
    pub noise_sd: f64,
    /// Assignment weight on the trailing treated-outcome average.
    pub gamma_assign: Vec<f64>,
    /// Assignment weight on the covariate-driven random function.
    pub gamma_cov: Vec<f64>,
    pub bias_assign: Vec<f64>,
    /// Effect magnitude of treatment l on outcome j.
    pub beta: Vec<Vec<f64>>,
    /// Trailing steps over which applied treatments keep contributing.
    pub effect_window: usize,
    /// Trailing steps averaged into the assignment signal, per treatment.
    pub outcome_windows: Vec<usize>,
    /// Covariate columns the assignment functions read; masking these is the
    /// hidden-confounder falsifiability probe.
    pub assign_driver_dims: Vec<usize>,
    pub spline_segments: usize,
    pub spline_degree: usize,
    pub spline_coef_sd: f64,
    /// Standard deviation of the single static per-patient offset.
    pub static_sd: f64,
}

impl Default for EhrConfig {
    fn default() -> Self {
        EhrConfig {
            n_units: 500,
            max_len: 60,
            min_len: 15,
            d_x: 25,
            d_y: 2,
            d_a: 2,
            alpha_spline: vec![1.0, 1.0],
            alpha_gp: vec![1.0, 1.0],
            alpha_rff: vec![1.0, 1.0],
            gp_lengthscale: 15.0,
            gp_variance: 1.0,
            cov_lengthscale: 10.0,
            cov_variance: 1.0,
            rff_features: 64,
            rff_lengthscale: 2.0,
            noise_sd: 0.1,
            gamma_assign: vec![0.5, 0.5],
            gamma_cov: vec![2.0, 2.0],
            bias_assign: vec![0.0, 0.0],
            beta: vec![vec![2.0, 1.2], vec![1.6, 2.4]],
            effect_window: 5,
            outcome_windows: vec![5, 5],
            assign_driver_dims: vec![0, 1],
            spline_segments: 6,
            spline_degree: 3,
            spline_coef_sd: 1.0,
            static_sd: 0.5,
        }
    }
}

impl EhrConfig {
    pub fn k_treatments(&self) -> usize {
        1 << self.d_a
    }

    pub fn config_kv(&self) -> Vec<(String, String)> {
        let join = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let joinu = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let mut kv = vec![
            ("n_units".into(), self.n_units.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("min_len".into(), self.min_len.to_string()),
            ("d_x".into(), self.d_x.to_string()),
            ("d_y".into(), self.d_y.to_string()),
            ("d_a".into(), self.d_a.to_string()),
            ("alpha_spline".into(), join(&self.alpha_spline)),
            ("alpha_gp".into(), join(&self.alpha_gp)),
            ("alpha_rff".into(), join(&self.alpha_rff)),
            ("gp_lengthscale".into(), self.gp_lengthscale.to_string()),
            ("gp_variance".into(), self.gp_variance.to_string()),
            ("cov_lengthscale".into(), self.cov_lengthscale.to_string()),
            ("cov_variance".into(), self.cov_variance.to_string()),
            ("rff_features".into(), self.rff_features.to_string()),
            ("rff_lengthscale".into(), self.rff_lengthscale.to_string()),
            ("noise_sd".into(), self.noise_sd.to_string()),
            ("gamma_assign".into(), join(&self.gamma_assign)),
            ("gamma_cov".into(), join(&self.gamma_cov)),
            ("bias_assign".into(), join(&self.bias_assign)),
            (
                "beta".into(),
                self.beta.iter().map(|row| join(row)).collect::<Vec<_>>().join("|"),
            ),
            ("effect_window".into(), self.effect_window.to_string()),
            ("outcome_windows".into(), joinu(&self.outcome_windows)),
            ("assign_driver_dims".into(), joinu(&self.assign_driver_dims)),
            ("spline_segments".into(), self.spline_segments.to_string()),
            ("spline_degree".into(), self.spline_degree.to_string()),
            ("spline_coef_sd".into(), self.spline_coef_sd.to_string()),
            ("static_sd".into(), self.static_sd.to_string()),
        ];
        kv.sort();
        kv
    }
}

/// Cohort-level draws shared by every unit.
pub struct EhrShared {
    /// spline_trend[j][t]: endogenous trend value per outcome and step.
    spline_trend: Vec<Vec<f64>>,
    f_z: Vec<RffFunction>,
    f_y: Vec<RffFunction>,
    chol_x: Vec<f64>,
    chol_g: Vec<f64>,
}

fn cholesky_of_kernel(len: usize, lengthscale: f64, variance: f64) -> Result<Vec<f64>, SimError> {
    let times: Vec<f64> = (1..=len).map(|t| t as f64).collect();
    let mut cov = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            cov[i * len + j] = matern32(times[i] - times[j], lengthscale, variance);
        }
    }
    let mut jitter = 1e-8;
    loop {
        let mut jittered = cov.clone();
        for i in 0..len {
            jittered[i * len + i] += jitter;
        }
        if let Some(l) = chol(&jittered, len) {
            return Ok(l);
        }
        jitter *= 10.0;
        if jitter > 1e-2 {
            return Err(SimError::BadQuery("covariance factorization failed".into()));
        }
    }
}

fn chol(mat: &[f64], n: usize) -> Option<Vec<f64>> {
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

pub fn ehr_shared(cfg: &EhrConfig, seed: u64) -> Result<EhrShared, SimError> {
    let mut rng = substream(seed, "sim.ehr.shared");
    let knots = open_uniform_knots(0.0, cfg.max_len as f64, cfg.spline_segments, cfg.spline_degree);
    let n_basis = knots.len() - cfg.spline_degree - 1;
    let coef_dist = Normal::new(0.0, cfg.spline_coef_sd).expect("valid normal");
    let mut spline_trend = Vec::with_capacity(cfg.d_y);
    for _ in 0..cfg.d_y {
        let coefs: Vec<f64> = (0..n_basis).map(|_| coef_dist.sample(&mut rng)).collect();
        let mut trend = Vec::with_capacity(cfg.max_len);
        for t in 1..=cfg.max_len {
            let basis = bspline_basis(t as f64, &knots, cfg.spline_degree)?;
            trend.push(basis.iter().zip(&coefs).map(|(&b, &c)| b * c).sum());
        }
        spline_trend.push(trend);
    }
    let f_z = (0..cfg.d_y)
        .map(|_| RffFunction::sample(cfg.d_x, cfg.rff_features, cfg.rff_lengthscale, &mut rng))
        .collect();
    let f_y = (0..cfg.d_a)
        .map(|_| {
            RffFunction::sample(
                cfg.assign_driver_dims.len(),
                cfg.rff_features,
                cfg.rff_lengthscale,
                &mut rng,
            )
        })
        .collect();
    Ok(EhrShared {
        spline_trend,
        f_z,
        f_y,
        chol_x: cholesky_of_kernel(cfg.max_len, cfg.cov_lengthscale, cfg.cov_variance)?,
        chol_g: cholesky_of_kernel(cfg.max_len, cfg.gp_lengthscale, cfg.gp_variance)?,
    })
}

fn gp_draw(chol: &[f64], len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    (0..len)
        .map(|i| chol[i * len..i * len + i + 1].iter().zip(&z).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// Trailing average of the mean treated outcome entering treatment l's logit.
fn treated_outcome_average(cfg: &EhrConfig, y_hist: &[Vec<f64>], t: usize, l: usize) -> f64 {
    let window = cfg.outcome_windows[l];
    let lo = t.saturating_sub(window);
    if lo == t {
        return 0.0;
    }
    let mut sum = 0.0;
    for row in &y_hist[lo..t] {
        sum += row.iter().sum::<f64>() / row.len() as f64;
    }
    sum / (t - lo) as f64
}

fn assignment_probs(cfg: &EhrConfig, fy_t: &[f64], y_hist: &[Vec<f64>], t: usize) -> Vec<f64> {
    (0..cfg.d_a)
        .map(|l| {
            let abar = treated_outcome_average(cfg, y_hist, t, l);
            stable_sigmoid(cfg.gamma_assign[l] * abar + cfg.gamma_cov[l] * fy_t[l] + cfg.bias_assign[l])
        })
        .collect()
}

/// Additive effect of the treatments inside the trailing window on outcome j,
/// with inverse-square recency weights: the step applied now has weight 1.
/// Among simultaneously active treatments the weakest signed contribution
/// (min over active l of p * beta) is what lands, matching the generator the
/// cohorts are modeled after.
pub fn apply_treatment_effect(
    a_hist: &[Vec<bool>],
    p_hist: &[Vec<f64>],
    beta: &[Vec<f64>],
    window: usize,
    t: usize,
    j: usize,
) -> f64 {
    let lo = t.saturating_sub(window);
    let mut total = 0.0;
    for i in lo..=t {
        let active: Vec<usize> = (0..a_hist[i].len()).filter(|&l| a_hist[i][l]).collect();
        if active.is_empty() {
            continue;
        }
        let contribution = active
            .iter()
            .map(|&l| p_hist[i][l] * beta[l][j])
            .fold(f64::INFINITY, f64::min);
        total += contribution / ((t - i + 1) * (t - i + 1)) as f64;
    }
    total
}

/// How treatments are chosen during a replay.
enum TreatmentSource<'a> {
    /// Sample from the per-unit stream (generation).
    Sample(&'a mut rand_chacha::ChaCha12Rng),
    /// Factual codes with a forced window (counterfactual rollout).
    Forced { factual: &'a [u8], origin: usize, plan: &'a [u8] },
}

struct ReplayResult {
    y: Vec<Vec<f64>>,
    codes: Vec<u8>,
    overlap_violations: usize,
}

/// Single engine for generation and counterfactual rollout: identical float
/// op order in both paths guarantees factual-plan consistency.
fn replay(
    cfg: &EhrConfig,
    z: &[Vec<f64>],
    fy: &[Vec<f64>],
    len: usize,
    mut source: TreatmentSource<'_>,
) -> ReplayResult {
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut a_hist: Vec<Vec<bool>> = Vec::with_capacity(len);
    let mut p_hist: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut codes = Vec::with_capacity(len);
    let mut overlap = 0usize;
    for t in 0..len {
        let probs = assignment_probs(cfg, &fy[t], &y_hist, t);
        for &p in &probs {
            if !(0.01..=0.99).contains(&p) {
                overlap += 1;
            }
        }
        let flags: Vec<bool> = match &mut source {
            TreatmentSource::Sample(rng) => probs.iter().map(|&p| rng.random::<f64>() < p).collect(),
            TreatmentSource::Forced { factual, origin, plan } => {
                let code = if t > *origin && t <= *origin + plan.len() {
                    plan[t - *origin - 1]
                } else {
                    factual[t]
                };
                (0..cfg.d_a).map(|l| code >> l & 1 == 1).collect()
            }
        };
        let code = flags
            .iter()
            .enumerate()
            .fold(0u8, |acc, (l, &f)| acc | ((f as u8) << l));
        a_hist.push(flags);
        p_hist.push(probs);
        let y_t: Vec<f64> = (0..cfg.d_y)
            .map(|j| z[j][t] + apply_treatment_effect(&a_hist, &p_hist, &cfg.beta, cfg.effect_window, t, j))
            .collect();
        y_hist.push(y_t);
        codes.push(code);
    }
    ReplayResult { y: y_hist, codes, overlap_violations: overlap }
}

pub fn simulate_ehr_unit(
    cfg: &EhrConfig,
    shared: &EhrShared,
    seed: u64,
    unit_id: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = unit_substream(seed, "sim.ehr", unit_id);
    let len_max = cfg.max_len;
    // Covariate paths, one GP per dimension, drawn over the full horizon.
    let x_paths: Vec<Vec<f64>> = (0..cfg.d_x).map(|_| gp_draw(&shared.chol_x, len_max, &mut rng)).collect();
    let g_paths: Vec<Vec<f64>> = (0..cfg.d_y).map(|_| gp_draw(&shared.chol_g, len_max, &mut rng)).collect();
    let baseline: f64 = {
        let d = Normal::new(0.0, cfg.static_sd).expect("valid normal");
        d.sample(&mut rng)
    };
    let noise = Normal::new(0.0, cfg.noise_sd).expect("valid normal");
    let active_len = rng.random_range(cfg.min_len..=cfg.max_len);

    // Untreated outcomes and assignment features, fixed before treatments.
    let mut z = vec![vec![0.0; active_len]; cfg.d_y];
    for j in 0..cfg.d_y {
        for t in 0..active_len {
            let x_t: Vec<f64> = x_paths.iter().map(|p| p[t]).collect();
            z[j][t] = cfg.alpha_spline[j] * shared.spline_trend[j][t]
                + cfg.alpha_gp[j] * g_paths[j][t]
                + cfg.alpha_rff[j] * shared.f_z[j].eval(&x_t)
                + baseline
                + noise.sample(&mut rng);
        }
    }
    let fy: Vec<Vec<f64>> = (0..active_len)
        .map(|t| {
            let drivers: Vec<f64> = cfg.assign_driver_dims.iter().map(|&d| x_paths[d][t]).collect();
            (0..cfg.d_a).map(|l| shared.f_y[l].eval(&drivers)).collect()
        })
        .collect();

    let result = replay(cfg, &z, &fy, active_len, TreatmentSource::Sample(&mut rng));

    let covariates: Vec<Vec<f64>> = (0..active_len)
        .map(|t| x_paths.iter().map(|p| p[t]).collect())
        .collect();
    let outcomes: Vec<f64> = result.y.iter().map(|row| row[0]).collect();

    let mut step_names: Vec<String> = (0..cfg.d_y).map(|j| format!("z_{j}")).collect();
    step_names.extend((0..cfg.d_a).map(|l| format!("fy_{l}")));
    let steps: Vec<Vec<f64>> = (0..active_len)
        .map(|t| {
            let mut row: Vec<f64> = (0..cfg.d_y).map(|j| z[j][t]).collect();
            row.extend(fy[t].iter().copied());
            row
        })
        .collect();
    let mut params = BTreeMap::new();
    params.insert("baseline".into(), baseline);
    params.insert("overlap_violations".into(), result.overlap_violations as f64);

    Ok(Trajectory {
        unit_id,
        statics: vec![baseline],
        covariates,
        treatments: result.codes,
        outcomes,
        active_len,
        sim_state: Some(SimState { params, step_names, steps }),
    })
}

pub fn simulate_ehr_cohort(
    cfg: &EhrConfig,
    seed: u64,
    id_offset: u64,
    workers: usize,
) -> Result<Cohort, SimError> {
    let shared = ehr_shared(cfg, seed)?;
    let ids: Vec<u64> = (0..cfg.n_units as u64).map(|i| id_offset + i).collect();
    let trajectories = super::tumor::run_partitioned(&ids, workers, |unit_id| {
        simulate_ehr_unit(cfg, &shared, seed, unit_id)
    })?;
    let overlap = trajectories
        .iter()
        .map(|t| t.sim_state.as_ref().unwrap().param("overlap_violations") as usize)
        .sum();
    let y_scale = trajectories
        .iter()
        .flat_map(|t| t.outcomes.iter().map(|y| y.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    Ok(Cohort {
        meta: CohortMeta {
            generator: "ehr".into(),
            seed,
            d_x: cfg.d_x,
            d_v: 1,
            k_treatments: cfg.k_treatments(),
            max_len: cfg.max_len,
            y_scale,
            x_scales: vec![1.0; cfg.d_x],
            overlap_violations: overlap,
            config_kv: cfg.config_kv(),
        },
        trajectories,
    })
}

/// Potential outcomes of outcome 0 under a forced plan starting after
/// `origin` (0-based), reusing the recorded untreated outcomes and
/// assignment features.
pub fn ground_truth_counterfactual_ehr(
    cfg: &EhrConfig,
    traj: &Trajectory,
    origin: usize,
    plan: &[u8],
) -> Result<Vec<f64>, SimError> {
    let state = traj.sim_state.as_ref().ok_or(SimError::MissingSimState)?;
    if plan.is_empty() {
        return Ok(vec![]);
    }
    if origin + plan.len() >= traj.active_len {
        return Err(SimError::BadQuery(format!(
            "origin {origin} + plan {} exceeds active length {}",
            plan.len(),
            traj.active_len
        )));
    }
    let k = cfg.k_treatments() as u8;
    if plan.iter().any(|&w| w >= k) {
        return Err(SimError::BadQuery("treatment code out of range".into()));
    }
    let end = origin + plan.len() + 1;
    let z: Vec<Vec<f64>> = (0..cfg.d_y)
        .map(|j| (0..end).map(|t| state.step_value(t, &format!("z_{j}"))).collect())
        .collect();
    let fy: Vec<Vec<f64>> = (0..end)
        .map(|t| (0..cfg.d_a).map(|l| state.step_value(t, &format!("fy_{l}"))).collect())
        .collect();
    let result = replay(
        cfg,
        &z,
        &fy,
        end,
        TreatmentSource::Forced { factual: &traj.treatments, origin, plan },
    );
    Ok(result.y[origin + 1..].iter().map(|row| row[0]).collect())
}
