//! One unit's longitudinal record plus the opaque generator state that makes
//! counterfactual rollouts exact.

use std::collections::BTreeMap;

/// Per-unit generator internals: enough to re-roll the trajectory bit-exactly
/// under the same seed and to answer counterfactual queries with shared noise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimState {
    /// Per-unit scalar parameters (growth rate, sensitivities, ...).
    pub params: BTreeMap<String, f64>,
    /// Column names of the per-step table.
    pub step_names: Vec<String>,
    /// Per-step recorded values (`active_len` rows), e.g. noise realizations.
    pub steps: Vec<Vec<f64>>,
}

impl SimState {
    pub fn step_value(&self, t: usize, name: &str) -> f64 {
        let col = self
            .step_names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("sim_state has no column {name}"));
        self.steps[t][col]
    }

    pub fn param(&self, name: &str) -> f64 {
        *self.params.get(name).unwrap_or_else(|| panic!("sim_state has no param {name}"))
    }
}

/// One unit: static covariates, per-step covariates/treatments/outcomes.
/// Vectors hold exactly `active_len` steps; files pad to the cohort maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub unit_id: u64,
    /// Static covariates V (d_v).
    pub statics: Vec<f64>,
    /// Per-step covariates X_t, `active_len` rows of d_x.
    pub covariates: Vec<Vec<f64>>,
    /// Treatment codes in {0..K-1}.
    pub treatments: Vec<u8>,
    /// Outcomes, unscaled.
    pub outcomes: Vec<f64>,
    pub active_len: usize,
    pub sim_state: Option<SimState>,
}

impl Trajectory {
    pub fn validate(&self) {
        assert_eq!(self.covariates.len(), self.active_len);
        assert_eq!(self.treatments.len(), self.active_len);
        assert_eq!(self.outcomes.len(), self.active_len);
        assert!(self.outcomes.iter().all(|y| y.is_finite()));
    }
}

/// Cohort-level metadata a consumer needs to interpret the trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortMeta {
    pub generator: String,
    pub seed: u64,
    pub d_x: usize,
    pub d_v: usize,
    pub k_treatments: usize,
    pub max_len: usize,
    /// Outcomes are divided by this before entering the model.
    pub y_scale: f64,
    /// Per-column divisors for the covariates on the model side.
    pub x_scales: Vec<f64>,
    /// Count of simulated steps whose assignment probability escaped
    /// (0.01, 0.99); nonzero values flag an overlap-violating config.
    pub overlap_violations: usize,
    /// Flattened generator configuration for provenance.
    pub config_kv: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub meta: CohortMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Cohort {
    pub fn n_units(&self) -> usize {
        self.trajectories.len()
    }

    /// Maximum outcome value over the cohort; the NRMSE normalizer.
    pub fn max_outcome(&self) -> f64 {
        self.trajectories
            .iter()
            .flat_map(|tr| tr.outcomes.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_outcome(&self) -> f64 {
        self.trajectories
            .iter()
            .flat_map(|tr| tr.outcomes.iter().map(|y| y.abs()))
            .fold(0.0, f64::max)
    }
}

/// Plug-in mutual information between a discretized real signal and a
/// discrete code, in nats. Used to verify that confounding strength is
/// monotone in the assignment coefficient.
pub fn plugin_mi_discretized(xs: &[f64], codes: &[u8], n_bins: usize, n_codes: usize) -> f64 {
    assert_eq!(xs.len(), codes.len());
    assert!(n_bins >= 2 && !xs.is_empty());
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_bins as f64).max(1e-12);
    let n = xs.len() as f64;
    let mut joint = vec![0.0f64; n_bins * n_codes];
    let mut px = vec![0.0f64; n_bins];
    let mut pw = vec![0.0f64; n_codes];
    for (&x, &w) in xs.iter().zip(codes) {
        let b = (((x - lo) / width) as usize).min(n_bins - 1);
        joint[b * n_codes + w as usize] += 1.0;
        px[b] += 1.0;
        pw[w as usize] += 1.0;
    }
    let mut mi = 0.0;
    for b in 0..n_bins {
        for w in 0..n_codes {
            let pj = joint[b * n_codes + w] / n;
            if pj > 0.0 {
                mi += pj * (pj * n * n / (px[b] * pw[w])).ln();
            }
        }
    }
    mi.max(0.0)
}
