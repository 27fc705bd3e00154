//! Confounded longitudinal cohort generators (tumor PK-PD and synthetic
//! EHR-style) plus exact ground-truth potential-outcome rollouts.

mod bspline;
mod ehr;
mod gp;
mod io;
pub mod rng;
mod trajectory;
mod tumor;

pub use bspline::{bspline_basis, open_uniform_knots, BsplineError};
pub use ehr::{
    apply_treatment_effect, ehr_shared, ground_truth_counterfactual_ehr, simulate_ehr_cohort,
    simulate_ehr_unit, EhrConfig, EhrShared,
};
pub use gp::{matern32, sample_gp_matern, GpError, RffFunction};
pub use io::{
    cohort_csv_path, file_content_hash, meta_path, read_cohort, simstate_path, write_atomic,
    write_cohort,
};
pub use trajectory::{plugin_mi_discretized, Cohort, CohortMeta, SimState, Trajectory};
pub use tumor::{
    assign_treatment_tumor, assignment_probability, diameter_from_volume,
    ground_truth_counterfactual, sample_pkpd_patient, simulate_tumor_cohort, simulate_tumor_unit,
    step_tumor, treatment_code, volume_from_diameter, PatientDraw, PkpdParams, TumorConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("tumor volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("prior for {0} kept producing invalid draws")]
    PriorRetriesExhausted(String),
    #[error("counterfactual query needs sim_state; real-data trajectories cannot answer it")]
    MissingSimState,
    #[error("bad counterfactual query: {0}")]
    BadQuery(String),
    #[error("bad cohort file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Bspline(#[from] BsplineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dispatches counterfactual ground truth by generator kind.
pub fn ground_truth_for(
    generator: &GeneratorConfig,
    traj: &Trajectory,
    origin: usize,
    plan: &[u8],
) -> Result<Vec<f64>, SimError> {
    match generator {
        GeneratorConfig::Tumor(cfg) => ground_truth_counterfactual(cfg, traj, origin, plan),
        GeneratorConfig::Ehr(cfg) => ground_truth_counterfactual_ehr(cfg, traj, origin, plan),
    }
}

/// Either simulator, as selected by the experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorConfig {
    Tumor(TumorConfig),
    Ehr(EhrConfig),
}

impl GeneratorConfig {
    pub fn n_units(&self) -> usize {
        match self {
            GeneratorConfig::Tumor(c) => c.n_units,
            GeneratorConfig::Ehr(c) => c.n_units,
        }
    }

    pub fn with_units(&self, n: usize) -> Self {
        let mut cfg = self.clone();
        match &mut cfg {
            GeneratorConfig::Tumor(c) => c.n_units = n,
            GeneratorConfig::Ehr(c) => c.n_units = n,
        }
        cfg
    }

    pub fn max_len(&self) -> usize {
        match self {
            GeneratorConfig::Tumor(c) => c.max_len,
            GeneratorConfig::Ehr(c) => c.max_len,
        }
    }

    pub fn simulate(&self, seed: u64, id_offset: u64, workers: usize) -> Result<Cohort, SimError> {
        match self {
            GeneratorConfig::Tumor(c) => simulate_tumor_cohort(c, seed, id_offset, workers),
            GeneratorConfig::Ehr(c) => simulate_ehr_cohort(c, seed, id_offset, workers),
        }
    }
}

/// Train/val/test triple with disjoint unit-id ranges; the EHR outcome scale
/// from the training cohort is propagated to the other splits so every stage
/// sees one consistent scale.
pub fn simulate_split(
    generator: &GeneratorConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    workers: usize,
) -> Result<(Cohort, Cohort, Cohort), SimError> {
    let train = generator.with_units(n_train).simulate(seed, 0, workers)?;
    let mut val = generator.with_units(n_val).simulate(seed, n_train as u64, workers)?;
    let mut test = generator
        .with_units(n_test)
        .simulate(seed, (n_train + n_val) as u64, workers)?;
    val.meta.y_scale = train.meta.y_scale;
    test.meta.y_scale = train.meta.y_scale;
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_tumor(gamma: f64) -> TumorConfig {
        TumorConfig { gamma, n_units: 200, max_len: 30, min_len: 20, ..Default::default() }
    }

    #[test]
    fn carrying_capacity_fixed_point() {
        let p = PkpdParams {
            growth: 0.01,
            k_cap: volume_from_diameter(30.0),
            chemo_sens: 0.028,
            radio_sens_lin: 0.04,
            radio_sens_quad: 0.004,
            noise_sd: 0.0,
        };
        let v = step_tumor(p.k_cap, 0.0, 0.0, 0.0, &p, 1e-3, p.k_cap).unwrap();
        assert_eq!(v, p.k_cap);
    }

    #[test]
    fn step_tumor_chemo_arithmetic() {
        // Growth term zero at v = K, chemo knocks off exactly 10%.
        let p = PkpdParams {
            growth: 0.5,
            k_cap: 1.0,
            chemo_sens: 0.1,
            radio_sens_lin: 0.0,
            radio_sens_quad: 0.0,
            noise_sd: 0.0,
        };
        let v = step_tumor(1.0, 1.0, 0.0, 0.0, &p, 1e-6, 10.0).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
    }

    #[test]
    fn untreated_tumor_grows_below_capacity() {
        let p = PkpdParams {
            growth: 0.02,
            k_cap: 100.0,
            chemo_sens: 0.0,
            radio_sens_lin: 0.0,
            radio_sens_quad: 0.0,
            noise_sd: 0.0,
        };
        let v = step_tumor(10.0, 0.0, 0.0, 0.0, &p, 1e-6, 1e6).unwrap();
        assert!(v > 10.0);
    }

    #[test]
    fn step_tumor_rejects_nonpositive_volume() {
        let p = PkpdParams {
            growth: 0.02,
            k_cap: 100.0,
            chemo_sens: 0.0,
            radio_sens_lin: 0.0,
            radio_sens_quad: 0.0,
            noise_sd: 0.0,
        };
        assert!(step_tumor(0.0, 0.0, 0.0, 0.0, &p, 1e-6, 1e6).is_err());
    }

    #[test]
    fn assignment_probability_midpoint_and_saturation() {
        // Mean diameter at delta -> exactly 0.5.
        assert_eq!(assignment_probability(&[6.5], 2.0, 13.0), 0.5);
        // Mean 13, gamma 2 -> logit 1 -> sigmoid(1).
        let p = assignment_probability(&[13.0], 2.0, 13.0);
        assert!((p - 0.7310585786300049).abs() < 1e-12);
        // gamma = 0 ignores history entirely.
        assert_eq!(assignment_probability(&[1.0, 12.0], 0.0, 13.0), 0.5);
    }

    #[test]
    fn pkpd_prior_determinism_and_degenerate() {
        let cfg = TumorConfig::default();
        let mut r1 = rng::unit_substream(9, "sim.tumor", 4);
        let mut r2 = rng::unit_substream(9, "sim.tumor", 4);
        let a = sample_pkpd_patient(&cfg, &mut r1).unwrap();
        let b = sample_pkpd_patient(&cfg, &mut r2).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.statics, b.statics);

        let degenerate = TumorConfig {
            growth_sd: 0.0,
            chemo_sens_sd: 0.0,
            radio_sens_sd: 0.0,
            type_chemo_mult: vec![1.0; 3],
            type_radio_mult: vec![1.0; 3],
            ..Default::default()
        };
        let mut r = rng::unit_substream(1, "sim.tumor", 0);
        let d = sample_pkpd_patient(&degenerate, &mut r).unwrap();
        assert_eq!(d.params.growth, degenerate.growth_mean);
        assert_eq!(d.params.chemo_sens, degenerate.chemo_sens_mean);
        assert_eq!(d.params.radio_sens_lin, degenerate.radio_sens_mean);
    }

    #[test]
    fn pkpd_prior_monte_carlo_means() {
        let cfg = TumorConfig::default();
        let n = 10_000;
        let mut sums = [0.0f64; 3];
        for unit in 0..n {
            let mut r = rng::unit_substream(42, "sim.tumor", unit);
            let d = sample_pkpd_patient(&cfg, &mut r).unwrap();
            sums[0] += d.params.growth;
            sums[1] += d.params.chemo_sens;
            sums[2] += d.params.radio_sens_lin;
        }
        let nf = n as f64;
        let avg_mult = |m: &[f64]| m.iter().sum::<f64>() / m.len() as f64;
        let cases = [
            (sums[0] / nf, cfg.growth_mean, cfg.growth_sd),
            (
                sums[1] / nf,
                cfg.chemo_sens_mean * avg_mult(&cfg.type_chemo_mult),
                cfg.chemo_sens_sd,
            ),
            (
                sums[2] / nf,
                cfg.radio_sens_mean * avg_mult(&cfg.type_radio_mult),
                cfg.radio_sens_sd,
            ),
        ];
        for (emp, expect, sd) in cases {
            // Mixture-of-types inflates the spread; 3 SEs of a conservative
            // bound (prior sd + 25% of mean across type multipliers).
            let se = (sd + 0.25 * expect) / nf.sqrt();
            assert!(
                (emp - expect).abs() < 3.0 * se,
                "empirical {emp} vs {expect} (3se = {})",
                3.0 * se
            );
        }
    }

    #[test]
    fn cohort_determinism_and_worker_independence() {
        let cfg = small_tumor(1.0);
        let a = simulate_tumor_cohort(&cfg, 3, 0, 1).unwrap();
        let b = simulate_tumor_cohort(&cfg, 3, 0, 4).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        let c = simulate_tumor_cohort(&cfg, 4, 0, 1).unwrap();
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn unconfounded_treated_rate_near_half() {
        let cfg = TumorConfig {
            gamma: 0.0,
            n_units: 1000,
            max_len: 20,
            min_len: 20,
            ..Default::default()
        };
        let cohort = simulate_tumor_cohort(&cfg, 11, 0, 2).unwrap();
        for t in 0..cfg.max_len {
            let mut chemo = 0usize;
            let mut radio = 0usize;
            for tr in &cohort.trajectories {
                chemo += (tr.treatments[t] & 1) as usize;
                radio += (tr.treatments[t] >> 1) as usize;
            }
            let n = cohort.trajectories.len() as f64;
            for rate in [chemo as f64 / n, radio as f64 / n] {
                assert!((rate - 0.5).abs() <= 0.05, "rate {rate} at step {t}");
            }
        }
    }

    #[test]
    fn confounding_mi_monotone_in_gamma() {
        let mut mis = Vec::new();
        for gamma in [1.0, 2.0, 3.0] {
            let cfg = small_tumor(gamma);
            let cohort = simulate_tumor_cohort(&cfg, 5, 0, 2).unwrap();
            let mut diam = Vec::new();
            let mut codes = Vec::new();
            for tr in &cohort.trajectories {
                let mut v_hist = vec![tr.sim_state.as_ref().unwrap().param("initial_volume")];
                v_hist.extend(tr.outcomes.iter().copied());
                for t in 0..tr.active_len {
                    let lo = (t + 1).saturating_sub(cfg.diameter_window);
                    let window = &v_hist[lo..=t];
                    let mean: f64 = window.iter().map(|&v| diameter_from_volume(v)).sum::<f64>()
                        / window.len() as f64;
                    diam.push(mean);
                    codes.push(tr.treatments[t]);
                }
            }
            mis.push(plugin_mi_discretized(&diam, &codes, 10, 4));
        }
        assert!(mis[0] <= mis[1] + 1e-9 && mis[1] <= mis[2] + 1e-9, "mi sequence {mis:?}");
    }

    #[test]
    fn factual_plan_reproduces_outcomes_bit_exactly() {
        let cfg = small_tumor(1.0);
        let cohort = simulate_tumor_cohort(&cfg, 7, 0, 1).unwrap();
        for tr in cohort.trajectories.iter().take(20) {
            let origin = 4;
            let tau = 5;
            let plan: Vec<u8> = tr.treatments[origin + 1..origin + 1 + tau].to_vec();
            let cf = ground_truth_counterfactual(&cfg, tr, origin, &plan).unwrap();
            assert_eq!(cf, tr.outcomes[origin + 1..origin + 1 + tau].to_vec());
        }
    }

    #[test]
    fn treatment_never_hurts_with_shared_noise() {
        let cfg = small_tumor(1.0);
        let cohort = simulate_tumor_cohort(&cfg, 13, 0, 1).unwrap();
        for tr in cohort.trajectories.iter().take(50) {
            let origin = 3;
            let tau = 5;
            let treated = ground_truth_counterfactual(&cfg, tr, origin, &vec![3u8; tau]).unwrap();
            let untreated = ground_truth_counterfactual(&cfg, tr, origin, &vec![0u8; tau]).unwrap();
            for (a, b) in treated.iter().zip(&untreated) {
                assert!(a <= b, "treated {a} > untreated {b}");
            }
        }
    }

    #[test]
    fn empty_plan_gives_empty_outcomes() {
        let cfg = small_tumor(1.0);
        let cohort = simulate_tumor_cohort(&cfg, 7, 0, 1).unwrap();
        let cf = ground_truth_counterfactual(&cfg, &cohort.trajectories[0], 2, &[]).unwrap();
        assert!(cf.is_empty());
    }

    #[test]
    fn counterfactual_requires_sim_state() {
        let cfg = small_tumor(1.0);
        let cohort = simulate_tumor_cohort(&cfg, 7, 0, 1).unwrap();
        let mut tr = cohort.trajectories[0].clone();
        tr.sim_state = None;
        assert!(matches!(
            ground_truth_counterfactual(&cfg, &tr, 2, &[0, 0]),
            Err(SimError::MissingSimState)
        ));
    }

    fn small_ehr() -> EhrConfig {
        EhrConfig { n_units: 40, max_len: 24, min_len: 16, ..Default::default() }
    }

    #[test]
    fn ehr_cohort_deterministic() {
        let cfg = small_ehr();
        let a = simulate_ehr_cohort(&cfg, 21, 0, 1).unwrap();
        let b = simulate_ehr_cohort(&cfg, 21, 0, 3).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn ehr_zero_beta_means_outcome_equals_untreated() {
        let cfg = EhrConfig { beta: vec![vec![0.0, 0.0], vec![0.0, 0.0]], ..small_ehr() };
        let cohort = simulate_ehr_cohort(&cfg, 8, 0, 1).unwrap();
        for tr in &cohort.trajectories {
            let state = tr.sim_state.as_ref().unwrap();
            for t in 0..tr.active_len {
                assert_eq!(tr.outcomes[t], state.step_value(t, "z_0"));
            }
        }
    }

    #[test]
    fn ehr_unconfounded_treated_rate() {
        let cfg = EhrConfig {
            gamma_assign: vec![0.0, 0.0],
            gamma_cov: vec![0.0, 0.0],
            bias_assign: vec![0.0, 0.0],
            n_units: 1000,
            max_len: 12,
            min_len: 12,
            ..Default::default()
        };
        let cohort = simulate_ehr_cohort(&cfg, 17, 0, 2).unwrap();
        let mut treated = 0usize;
        let mut total = 0usize;
        for tr in &cohort.trajectories {
            for &w in &tr.treatments {
                treated += (w & 1) as usize;
                total += 1;
            }
        }
        let rate = treated as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn ehr_factual_plan_consistency() {
        let cfg = small_ehr();
        let cohort = simulate_ehr_cohort(&cfg, 31, 0, 1).unwrap();
        for tr in cohort.trajectories.iter().take(10) {
            let origin = 3;
            let tau = 6;
            let plan: Vec<u8> = tr.treatments[origin + 1..origin + 1 + tau].to_vec();
            let cf = ground_truth_counterfactual_ehr(&cfg, tr, origin, &plan).unwrap();
            assert_eq!(cf, tr.outcomes[origin + 1..origin + 1 + tau].to_vec());
        }
    }

    #[test]
    fn effect_weights_follow_recency() {
        // Single treatment applied at the current step with p*beta = 1.
        let beta = vec![vec![1.0], vec![1.0]];
        let a_now = vec![vec![true, false]];
        let p_now = vec![vec![1.0, 0.3]];
        let e = apply_treatment_effect(&a_now, &p_now, &beta, 5, 0, 0);
        assert_eq!(e, 1.0);
        // Same treatment one step ago decays by 1/4; nothing new applied.
        let a_hist = vec![vec![true, false], vec![false, false]];
        let p_hist = vec![vec![1.0, 0.3], vec![0.5, 0.5]];
        let e = apply_treatment_effect(&a_hist, &p_hist, &beta, 5, 1, 0);
        assert_eq!(e, 0.25);
        // Empty window contributes nothing.
        let a_none = vec![vec![false, false]];
        let p_none = vec![vec![0.5, 0.5]];
        assert_eq!(apply_treatment_effect(&a_none, &p_none, &beta, 5, 0, 0), 0.0);
    }

    #[test]
    fn cohort_roundtrip_through_files() {
        let cfg = small_tumor(2.0);
        let cohort = simulate_tumor_cohort(&cfg, 19, 0, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("cfseq-io-test-{}", std::process::id()));
        write_cohort(&dir, "train", &cohort, "fp-test").unwrap();
        let (back, fp) = read_cohort(&dir, "train").unwrap();
        assert_eq!(fp, "fp-test");
        assert_eq!(back.meta, cohort.meta);
        assert_eq!(back.trajectories, cohort.trajectories);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_has_disjoint_units_and_shared_scale() {
        let gen = GeneratorConfig::Ehr(small_ehr());
        let (train, val, test) = simulate_split(&gen, 10, 5, 8, 2, 2).unwrap();
        assert_eq!(train.trajectories.len(), 10);
        assert_eq!(val.trajectories[0].unit_id, 10);
        assert_eq!(test.trajectories[0].unit_id, 15);
        assert_eq!(val.meta.y_scale, train.meta.y_scale);
        assert_eq!(test.meta.y_scale, train.meta.y_scale);
    }
}
