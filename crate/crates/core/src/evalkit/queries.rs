//! Counterfactual query generation over a simulated cohort.

use crate::simkit::{ground_truth_for, Cohort, GeneratorConfig, SimError};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// A single treatment sliding over the forecast window, every non-null
    /// treatment at every offset.
    Sliding,
    /// Independent uniform treatment at each step.
    Random,
    /// The factual plan; ground truth is the recorded outcomes.
    Factual,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sliding" => Strategy::Sliding,
            "random" => Strategy::Random,
            "factual" => Strategy::Factual,
            _ => return None,
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Sliding => "sliding",
            Strategy::Random => "random",
            Strategy::Factual => "factual",
        }
    }
}

/// One counterfactual question: a history prefix, a forced plan, and (for
/// simulated cohorts) the true potential outcomes.
#[derive(Clone, Debug)]
pub struct CfQuery {
    pub unit_id: u64,
    /// Index into the cohort's trajectory list.
    pub unit_idx: usize,
    /// 0-based origin step; the plan covers origin+1 ..= origin+tau.
    pub origin: usize,
    pub plan: Vec<u8>,
    /// Unscaled potential outcomes, one per horizon step.
    pub ground_truth: Option<Vec<f64>>,
    pub strategy: Strategy,
}

fn usable_origins(active_len: usize, tau: usize, stride: usize) -> impl Iterator<Item = usize> {
    let last = active_len.checked_sub(tau + 1);
    (0..=last.unwrap_or(0))
        .step_by(stride.max(1))
        .take_while(move |_| last.is_some())
}

/// Every (origin, non-null treatment, offset) combination: the plan is
/// no-treatment except for one slot. `origin_stride` subsamples origins
/// uniformly (1 = exhaustive).
pub fn gen_queries_sliding(
    cohort: &Cohort,
    generator: &GeneratorConfig,
    tau: usize,
    origin_stride: usize,
) -> Result<Vec<CfQuery>, SimError> {
    assert!(tau >= 1);
    let k = cohort.meta.k_treatments as u8;
    let mut out = Vec::new();
    for (unit_idx, tr) in cohort.trajectories.iter().enumerate() {
        for origin in usable_origins(tr.active_len, tau, origin_stride) {
            for treatment in 1..k {
                for offset in 1..=tau {
                    let mut plan = vec![0u8; tau];
                    plan[offset - 1] = treatment;
                    let gt = ground_truth_for(generator, tr, origin, &plan)?;
                    out.push(CfQuery {
                        unit_id: tr.unit_id,
                        unit_idx,
                        origin,
                        plan,
                        ground_truth: Some(gt),
                        strategy: Strategy::Sliding,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// One uniformly random plan per origin.
pub fn gen_queries_random(
    cohort: &Cohort,
    generator: &GeneratorConfig,
    tau: usize,
    origin_stride: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CfQuery>, SimError> {
    if tau == 0 {
        return Err(SimError::BadQuery("random strategy needs tau >= 1".into()));
    }
    let k = cohort.meta.k_treatments as u8;
    let mut out = Vec::new();
    for (unit_idx, tr) in cohort.trajectories.iter().enumerate() {
        for origin in usable_origins(tr.active_len, tau, origin_stride) {
            let plan: Vec<u8> = (0..tau).map(|_| rng.random_range(0..k)).collect();
            let gt = ground_truth_for(generator, tr, origin, &plan)?;
            out.push(CfQuery {
                unit_id: tr.unit_id,
                unit_idx,
                origin,
                plan,
                ground_truth: Some(gt),
                strategy: Strategy::Random,
            });
        }
    }
    Ok(out)
}

/// The factual plan routed through the counterfactual path; ground truth is
/// the recorded outcome sequence (consistency).
pub fn gen_queries_factual(cohort: &Cohort, tau: usize, origin_stride: usize) -> Vec<CfQuery> {
    assert!(tau >= 1);
    let mut out = Vec::new();
    for (unit_idx, tr) in cohort.trajectories.iter().enumerate() {
        for origin in usable_origins(tr.active_len, tau, origin_stride) {
            out.push(CfQuery {
                unit_id: tr.unit_id,
                unit_idx,
                origin,
                plan: tr.treatments[origin + 1..=origin + tau].to_vec(),
                ground_truth: Some(tr.outcomes[origin + 1..=origin + tau].to_vec()),
                strategy: Strategy::Factual,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{simulate_tumor_cohort, TumorConfig};

    fn cohort_and_gen() -> (Cohort, GeneratorConfig) {
        let cfg = TumorConfig { n_units: 3, max_len: 12, min_len: 10, ..Default::default() };
        let cohort = simulate_tumor_cohort(&cfg, 2, 0, 1).unwrap();
        (cohort, GeneratorConfig::Tumor(cfg))
    }

    #[test]
    fn sliding_enumerates_treatment_by_offset() {
        let (cohort, gen) = cohort_and_gen();
        let tau = 2;
        let queries = gen_queries_sliding(&cohort, &gen, tau, 1).unwrap();
        // (K-1) * tau = 6 per origin.
        let origins: usize = cohort
            .trajectories
            .iter()
            .map(|t| t.active_len - tau)
            .sum();
        assert_eq!(queries.len(), origins * 6);
        for q in &queries {
            let non_null = q.plan.iter().filter(|&&w| w != 0).count();
            assert_eq!(non_null, 1, "exactly one non-null entry");
            assert_eq!(q.ground_truth.as_ref().unwrap().len(), tau);
        }
    }

    #[test]
    fn sliding_tau_one_is_one_query_per_treatment() {
        let (cohort, gen) = cohort_and_gen();
        let queries = gen_queries_sliding(&cohort, &gen, 1, 1).unwrap();
        let origins: usize = cohort.trajectories.iter().map(|t| t.active_len - 1).sum();
        assert_eq!(queries.len(), origins * 3);
    }

    #[test]
    fn random_plans_are_seeded_and_uniform() {
        let (cohort, gen) = cohort_and_gen();
        let mut r1 = crate::simkit::rng::substream(5, "queries");
        let mut r2 = crate::simkit::rng::substream(5, "queries");
        let q1 = gen_queries_random(&cohort, &gen, 3, 1, &mut r1).unwrap();
        let q2 = gen_queries_random(&cohort, &gen, 3, 1, &mut r2).unwrap();
        assert_eq!(q1.len(), q2.len());
        for (a, b) in q1.iter().zip(&q2) {
            assert_eq!(a.plan, b.plan);
        }
        // Frequencies approach 1/K over many draws.
        let big = TumorConfig { n_units: 60, max_len: 40, min_len: 40, ..Default::default() };
        let cohort = simulate_tumor_cohort(&big, 3, 0, 2).unwrap();
        let genb = GeneratorConfig::Tumor(big);
        let mut rng = crate::simkit::rng::substream(7, "queries");
        let queries = gen_queries_random(&cohort, &genb, 5, 1, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for q in &queries {
            for &w in &q.plan {
                counts[w as usize] += 1;
                total += 1;
            }
        }
        assert!(total > 10_000);
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn factual_queries_carry_recorded_outcomes() {
        let (cohort, _) = cohort_and_gen();
        let queries = gen_queries_factual(&cohort, 2, 1);
        for q in queries {
            let tr = &cohort.trajectories[q.unit_idx];
            assert_eq!(q.plan, tr.treatments[q.origin + 1..=q.origin + 2].to_vec());
            assert_eq!(
                q.ground_truth.unwrap(),
                tr.outcomes[q.origin + 1..=q.origin + 2].to_vec()
            );
        }
    }
}
