//! Discrete-time tumor growth under chemotherapy and radiotherapy with
//! volume-dependent treatment assignment.
//!
//! Volume evolves as
//!   v_next = (1 + L*ln(K/v) - kc*C - (krd*Rd + ups*Rd^2) + e) * v
//! with per-patient parameters drawn from configured priors. Chemotherapy
//! concentration follows one-day half-life decay; radiotherapy applies a
//! fixed dose on administration days. Assignment confounds on the mean tumor
//! diameter over a trailing window.

use super::rng::unit_substream;
use super::trajectory::{Cohort, CohortMeta, SimState, Trajectory};
use super::SimError;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Sphere volume (cm^3) of a tumor with the given diameter (cm).
pub fn volume_from_diameter(d_cm: f64) -> f64 {
    std::f64::consts::PI * d_cm.powi(3) / 6.0
}

/// Inverse of [`volume_from_diameter`].
pub fn diameter_from_volume(v: f64) -> f64 {
    (6.0 * v / std::f64::consts::PI).cbrt()
}

/// Per-patient pharmacokinetic/pharmacodynamic parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PkpdParams {
    /// Growth rate multiplying ln(K/v).
    pub growth: f64,
    /// Carrying capacity (volume units).
    pub k_cap: f64,
    /// Chemotherapy sensitivity (per concentration unit).
    pub chemo_sens: f64,
    /// Linear radiotherapy sensitivity (per gray).
    pub radio_sens_lin: f64,
    /// Quadratic radiotherapy sensitivity (per gray^2).
    pub radio_sens_quad: f64,
    pub noise_sd: f64,
}

/// Prior and mechanism configuration. These documented defaults are the
/// definition of the generator for all downstream tests.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorConfig {
    /// Confounding level; 0 gives unconfounded Bernoulli(0.5) assignment.
    pub gamma: f64,
    pub n_units: usize,
    pub max_len: usize,
    /// Minimum active length (callers use horizon + 5).
    pub min_len: usize,
    pub growth_mean: f64,
    pub growth_sd: f64,
    pub chemo_sens_mean: f64,
    pub chemo_sens_sd: f64,
    pub radio_sens_mean: f64,
    pub radio_sens_sd: f64,
    /// Quadratic radio term is linear / this ratio (classic alpha/beta).
    pub radio_quad_ratio: f64,
    pub noise_sd: f64,
    /// Concentration added per chemotherapy administration.
    pub chemo_dose: f64,
    /// Gray applied per radiotherapy administration.
    pub radio_dose: f64,
    /// Maximum tumor diameter (cm); also sets the volume cap and D_max in
    /// the assignment logit.
    pub d_max_cm: f64,
    /// Carrying-capacity diameter (cm).
    pub k_cap_diameter_cm: f64,
    pub v_min: f64,
    /// Trailing window (days) for the mean diameter in assignment.
    pub diameter_window: usize,
    /// Mean initial diameter per stage (cm); stage drawn uniformly.
    pub stage_diameter_means: Vec<f64>,
    pub stage_diameter_sd: f64,
    /// Multipliers on chemo/radio sensitivity per patient type.
    pub type_chemo_mult: Vec<f64>,
    pub type_radio_mult: Vec<f64>,
}

impl Default for TumorConfig {
    fn default() -> Self {
        TumorConfig {
            gamma: 1.0,
            n_units: 1000,
            max_len: 60,
            min_len: 15,
            growth_mean: 0.0005,
            growth_sd: 0.00015,
            chemo_sens_mean: 0.028,
            chemo_sens_sd: 0.0007,
            radio_sens_mean: 0.04,
            radio_sens_sd: 0.005,
            radio_quad_ratio: 10.0,
            noise_sd: 0.01,
            chemo_dose: 5.0,
            radio_dose: 2.0,
            d_max_cm: 13.0,
            k_cap_diameter_cm: 30.0,
            v_min: 1e-3,
            diameter_window: 15,
            stage_diameter_means: vec![4.0, 6.0, 8.0, 10.0],
            stage_diameter_sd: 1.0,
            type_chemo_mult: vec![0.8, 1.0, 1.2],
            type_radio_mult: vec![1.2, 1.0, 0.8],
        }
    }
}

impl TumorConfig {
    pub fn v_max(&self) -> f64 {
        volume_from_diameter(self.d_max_cm)
    }

    pub fn k_cap(&self) -> f64 {
        volume_from_diameter(self.k_cap_diameter_cm)
    }

    pub fn n_types(&self) -> usize {
        self.type_chemo_mult.len()
    }

    /// d_x: pre-treatment volume plus the patient-type one-hot.
    pub fn d_x(&self) -> usize {
        1 + self.n_types()
    }

    /// d_v: patient-type one-hot plus the initial-stage fraction.
    pub fn d_v(&self) -> usize {
        self.n_types() + 1
    }

    pub fn config_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("gamma".into(), self.gamma.to_string()),
            ("n_units".into(), self.n_units.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("min_len".into(), self.min_len.to_string()),
            ("growth_mean".into(), self.growth_mean.to_string()),
            ("growth_sd".into(), self.growth_sd.to_string()),
            ("chemo_sens_mean".into(), self.chemo_sens_mean.to_string()),
            ("chemo_sens_sd".into(), self.chemo_sens_sd.to_string()),
            ("radio_sens_mean".into(), self.radio_sens_mean.to_string()),
            ("radio_sens_sd".into(), self.radio_sens_sd.to_string()),
            ("radio_quad_ratio".into(), self.radio_quad_ratio.to_string()),
            ("noise_sd".into(), self.noise_sd.to_string()),
            ("chemo_dose".into(), self.chemo_dose.to_string()),
            ("radio_dose".into(), self.radio_dose.to_string()),
            ("d_max_cm".into(), self.d_max_cm.to_string()),
            ("k_cap_diameter_cm".into(), self.k_cap_diameter_cm.to_string()),
            ("v_min".into(), self.v_min.to_string()),
            ("diameter_window".into(), self.diameter_window.to_string()),
            ("stage_diameter_sd".into(), self.stage_diameter_sd.to_string()),
        ];
        kv.push((
            "stage_diameter_means".into(),
            join_floats(&self.stage_diameter_means),
        ));
        kv.push(("type_chemo_mult".into(), join_floats(&self.type_chemo_mult)));
        kv.push(("type_radio_mult".into(), join_floats(&self.type_radio_mult)));
        kv.sort();
        kv
    }
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

const PRIOR_RETRIES: usize = 64;

fn draw_positive(rng: &mut impl Rng, mean: f64, sd: f64, what: &str) -> Result<f64, SimError> {
    let dist = Normal::new(mean, sd).expect("valid normal");
    for _ in 0..PRIOR_RETRIES {
        let x = dist.sample(rng);
        if x > 0.0 {
            return Ok(x);
        }
    }
    Err(SimError::PriorRetriesExhausted(what.to_string()))
}

/// Everything sampled once per patient.
#[derive(Clone, Debug)]
pub struct PatientDraw {
    pub params: PkpdParams,
    pub patient_type: usize,
    pub stage: usize,
    pub initial_volume: f64,
    pub statics: Vec<f64>,
}

/// Draws per-patient parameters and static covariates from the priors.
pub fn sample_pkpd_patient(cfg: &TumorConfig, rng: &mut impl Rng) -> Result<PatientDraw, SimError> {
    if cfg.k_cap() <= 0.0 {
        return Err(SimError::PriorRetriesExhausted("k_cap".into()));
    }
    let n_types = cfg.n_types();
    let patient_type = rng.random_range(0..n_types);
    let n_stages = cfg.stage_diameter_means.len();
    let stage = rng.random_range(0..n_stages);
    let d0 = {
        let mean = cfg.stage_diameter_means[stage];
        let dist = Normal::new(mean, cfg.stage_diameter_sd).expect("valid normal");
        let mut d = dist.sample(rng);
        let mut tries = 0;
        while (d <= 0.1 || d >= cfg.d_max_cm) && tries < PRIOR_RETRIES {
            d = dist.sample(rng);
            tries += 1;
        }
        if d <= 0.1 || d >= cfg.d_max_cm {
            return Err(SimError::PriorRetriesExhausted("initial_diameter".into()));
        }
        d
    };
    let growth = draw_positive(rng, cfg.growth_mean, cfg.growth_sd, "growth")?;
    let chemo = draw_positive(
        rng,
        cfg.chemo_sens_mean * cfg.type_chemo_mult[patient_type],
        cfg.chemo_sens_sd,
        "chemo_sens",
    )?;
    let radio = draw_positive(
        rng,
        cfg.radio_sens_mean * cfg.type_radio_mult[patient_type],
        cfg.radio_sens_sd,
        "radio_sens",
    )?;
    let mut statics = vec![0.0; n_types];
    statics[patient_type] = 1.0;
    statics.push((stage + 1) as f64 / n_stages as f64);
    Ok(PatientDraw {
        params: PkpdParams {
            growth,
            k_cap: cfg.k_cap(),
            chemo_sens: chemo,
            radio_sens_lin: radio,
            radio_sens_quad: radio / cfg.radio_quad_ratio,
            noise_sd: cfg.noise_sd,
        },
        patient_type,
        stage,
        initial_volume: volume_from_diameter(d0),
        statics,
    })
}

/// One day of tumor dynamics; `radiation_dose` in gray, `chemo_conc` the
/// current drug concentration. Clamped to [v_min, v_max].
pub fn step_tumor(
    v_prev: f64,
    chemo_conc: f64,
    radiation_dose: f64,
    noise: f64,
    p: &PkpdParams,
    v_min: f64,
    v_max: f64,
) -> Result<f64, SimError> {
    if v_prev <= 0.0 {
        return Err(SimError::NonPositiveVolume(v_prev));
    }
    let factor = 1.0 + p.growth * (p.k_cap / v_prev).ln()
        - p.chemo_sens * chemo_conc
        - (p.radio_sens_lin * radiation_dose + p.radio_sens_quad * radiation_dose * radiation_dose)
        + noise;
    Ok((factor * v_prev).clamp(v_min, v_max))
}

/// Assignment logit from the trailing mean diameter.
pub fn assignment_probability(diameter_window: &[f64], gamma: f64, d_max: f64) -> f64 {
    assert!(!diameter_window.is_empty());
    let mean: f64 = diameter_window.iter().sum::<f64>() / diameter_window.len() as f64;
    let pi = gamma / d_max * (mean - d_max / 2.0);
    crate::diffcore::stable_sigmoid(pi)
}

/// Draws the chemo and radio flags for one step; returns (chemo, radio, p).
pub fn assign_treatment_tumor(
    diameter_window: &[f64],
    gamma: f64,
    d_max: f64,
    rng: &mut impl Rng,
) -> (bool, bool, f64) {
    let p = assignment_probability(diameter_window, gamma, d_max);
    let chemo = rng.random::<f64>() < p;
    let radio = rng.random::<f64>() < p;
    (chemo, radio, p)
}

pub fn treatment_code(chemo: bool, radio: bool) -> u8 {
    chemo as u8 + 2 * (radio as u8)
}

fn noise_dist(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("valid normal")
}

/// Simulates one unit from its dedicated stream; `unit_id` selects the stream.
pub fn simulate_tumor_unit(cfg: &TumorConfig, seed: u64, unit_id: u64) -> Result<Trajectory, SimError> {
    let mut rng = unit_substream(seed, "sim.tumor", unit_id);
    let draw = sample_pkpd_patient(cfg, &mut rng)?;
    let active_len = rng.random_range(cfg.min_len..=cfg.max_len);
    let noise = noise_dist(cfg.noise_sd);
    let v_max = cfg.v_max();

    let mut type_onehot = vec![0.0; cfg.n_types()];
    type_onehot[draw.patient_type] = 1.0;

    let mut covariates = Vec::with_capacity(active_len);
    let mut treatments = Vec::with_capacity(active_len);
    let mut outcomes = Vec::with_capacity(active_len);
    let mut steps = Vec::with_capacity(active_len);
    let mut overlap = 0usize;

    let mut v_hist = vec![draw.initial_volume];
    let mut conc = 0.0;
    for _ in 0..active_len {
        let v_pre = *v_hist.last().unwrap();
        let mut x = vec![v_pre];
        x.extend_from_slice(&type_onehot);

        let w_start = v_hist.len().saturating_sub(cfg.diameter_window);
        let window: Vec<f64> = v_hist[w_start..].iter().map(|&v| diameter_from_volume(v)).collect();
        let (chemo, radio, p) = assign_treatment_tumor(&window, cfg.gamma, cfg.d_max_cm, &mut rng);
        if !(0.01..=0.99).contains(&p) {
            overlap += 1;
        }
        conc = conc / 2.0 + if chemo { cfg.chemo_dose } else { 0.0 };
        let rd = if radio { cfg.radio_dose } else { 0.0 };
        let e = noise.sample(&mut rng);
        let v_next = step_tumor(v_pre, conc, rd, e, &draw.params, cfg.v_min, v_max)?;

        covariates.push(x);
        treatments.push(treatment_code(chemo, radio));
        outcomes.push(v_next);
        steps.push(vec![e]);
        v_hist.push(v_next);
    }

    let mut params = BTreeMap::new();
    params.insert("growth".into(), draw.params.growth);
    params.insert("k_cap".into(), draw.params.k_cap);
    params.insert("chemo_sens".into(), draw.params.chemo_sens);
    params.insert("radio_sens_lin".into(), draw.params.radio_sens_lin);
    params.insert("radio_sens_quad".into(), draw.params.radio_sens_quad);
    params.insert("noise_sd".into(), draw.params.noise_sd);
    params.insert("initial_volume".into(), draw.initial_volume);
    params.insert("overlap_violations".into(), overlap as f64);

    Ok(Trajectory {
        unit_id,
        statics: draw.statics,
        covariates,
        treatments,
        outcomes,
        active_len,
        sim_state: Some(SimState {
            params,
            step_names: vec!["noise".into()],
            steps,
        }),
    })
}

/// Simulates a cohort; `id_offset` keeps train/val/test streams disjoint.
/// `workers` only partitions the work: results are identical for any count.
pub fn simulate_tumor_cohort(
    cfg: &TumorConfig,
    seed: u64,
    id_offset: u64,
    workers: usize,
) -> Result<Cohort, SimError> {
    let ids: Vec<u64> = (0..cfg.n_units as u64).map(|i| id_offset + i).collect();
    let trajectories = run_partitioned(&ids, workers, |unit_id| {
        simulate_tumor_unit(cfg, seed, unit_id)
    })?;
    let overlap = trajectories
        .iter()
        .map(|t| t.sim_state.as_ref().unwrap().param("overlap_violations") as usize)
        .sum();
    let mut x_scales = vec![cfg.v_max()];
    x_scales.extend(vec![1.0; cfg.n_types()]);
    Ok(Cohort {
        meta: CohortMeta {
            generator: "tumor".into(),
            seed,
            d_x: cfg.d_x(),
            d_v: cfg.d_v(),
            k_treatments: 4,
            max_len: cfg.max_len,
            y_scale: cfg.v_max(),
            x_scales,
            overlap_violations: overlap,
            config_kv: cfg.config_kv(),
        },
        trajectories,
    })
}

/// Deterministic fan-out over units: the output order is the input order no
/// matter how many workers run.
pub(crate) fn run_partitioned<T: Send>(
    ids: &[u64],
    workers: usize,
    f: impl Fn(u64) -> Result<T, SimError> + Sync,
) -> Result<Vec<T>, SimError> {
    let workers = workers.max(1).min(ids.len().max(1));
    if workers <= 1 {
        return ids.iter().map(|&id| f(id)).collect();
    }
    let mut slots: Vec<Option<Result<T, SimError>>> = (0..ids.len()).map(|_| None).collect();
    let chunk = ids.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            let ids = &ids[w * chunk..(w * chunk + slot_chunk.len())];
            scope.spawn(move || {
                for (slot, &id) in slot_chunk.iter_mut().zip(ids) {
                    *slot = Some(f(id));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

/// Re-rolls the simulator from the recorded state at `origin` under a forced
/// plan, reusing the recorded per-step noise so differences isolate the
/// treatments. `origin` is a 0-based step index; the plan covers steps
/// origin+1 ..= origin+plan.len().
pub fn ground_truth_counterfactual(
    cfg: &TumorConfig,
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
    if plan.iter().any(|&w| w > 3) {
        return Err(SimError::BadQuery("treatment code out of range".into()));
    }
    let params = PkpdParams {
        growth: state.param("growth"),
        k_cap: state.param("k_cap"),
        chemo_sens: state.param("chemo_sens"),
        radio_sens_lin: state.param("radio_sens_lin"),
        radio_sens_quad: state.param("radio_sens_quad"),
        noise_sd: state.param("noise_sd"),
    };
    // Reconstruct drug concentration from the factual prefix.
    let mut conc = 0.0;
    for s in 0..=origin {
        conc = conc / 2.0 + if traj.treatments[s] & 1 == 1 { cfg.chemo_dose } else { 0.0 };
    }
    let mut v = traj.outcomes[origin];
    let mut out = Vec::with_capacity(plan.len());
    for (j, &w) in plan.iter().enumerate() {
        let s = origin + 1 + j;
        conc = conc / 2.0 + if w & 1 == 1 { cfg.chemo_dose } else { 0.0 };
        let rd = if w & 2 == 2 { cfg.radio_dose } else { 0.0 };
        let e = state.step_value(s, "noise");
        v = step_tumor(v, conc, rd, e, &params, cfg.v_min, cfg.v_max())?;
        out.push(v);
    }
    Ok(out)
}
