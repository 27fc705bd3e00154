//! Balance diagnostics: a freshly fit softmax probe measures how predictive
//! a feature set is of the next treatment. Comparing the probe on frozen
//! representations against one on raw history summaries operationalizes the
//! balancing-equilibrium claim.

use crate::diffcore::{adamw_step, AdamWConfig, AdamWState, Array, DiffResult, Graph, ParamStore};
use crate::nn::cross_entropy_mean;
use crate::simkit::{diameter_from_volume, Cohort};

pub struct Probe {
    w: Array,
    b: Array,
    pub k: usize,
}

/// Full-batch multinomial logistic regression, trained to convergence with
/// the adaptive optimizer. Deterministic (zero init, fixed epochs).
pub fn fit_softmax_probe(
    features: &[Vec<f64>],
    labels: &[u8],
    k: usize,
    epochs: usize,
    lr: f64,
) -> DiffResult<Probe> {
    assert_eq!(features.len(), labels.len());
    let d = features[0].len();
    let n = features.len();
    let mut x_data = Vec::with_capacity(n * d);
    for f in features {
        x_data.extend_from_slice(f);
    }
    let x = Array::new(vec![n, d], x_data);
    let targets: Vec<usize> = labels.iter().map(|&w| w as usize).collect();

    let mut store = ParamStore::new();
    store.insert("probe.w", Array::zeros(&[d, k]));
    store.insert("probe.b", Array::zeros(&[k]));
    let names = vec!["probe.w".to_string(), "probe.b".to_string()];
    let mut opt = AdamWState::new();
    let cfg = AdamWConfig::with_lr(lr);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let binding = store.bind_all(&mut g);
        let xv = g.constant(x.clone());
        let logits = g.affine(xv, binding.id("probe.w"), binding.id("probe.b"))?;
        let loss = cross_entropy_mean(&mut g, logits, &targets)?;
        let grads = g.backward(loss)?;
        let gm = binding.extract_grads(&g, &grads, &names);
        adamw_step(&mut store, &gm, &mut opt, &cfg)?;
    }
    Ok(Probe { w: store.get("probe.w").clone(), b: store.get("probe.b").clone(), k })
}

impl Probe {
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let mut correct = 0usize;
        for (f, &y) in features.iter().zip(labels) {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for class in 0..self.k {
                let mut v = self.b.data()[class];
                for (i, &xi) in f.iter().enumerate() {
                    v += xi * self.w.at2(i, class);
                }
                if v > best_v {
                    best_v = v;
                    best = class;
                }
            }
            correct += (best == y as usize) as usize;
        }
        correct as f64 / labels.len() as f64
    }

    /// Mean held-out log-likelihood under the probe.
    pub fn mean_log_likelihood(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let logits: Vec<f64> = (0..self.k)
                .map(|class| {
                    let mut v = self.b.data()[class];
                    for (i, &xi) in f.iter().enumerate() {
                        v += xi * self.w.at2(i, class);
                    }
                    v
                })
                .collect();
            let lse = crate::diffcore::log_sum_exp_slice(&logits);
            total += logits[y as usize] - lse;
        }
        total / labels.len() as f64
    }
}

/// Fraction of the most common label.
pub fn majority_rate(labels: &[u8]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len() as f64
}

/// Entropy of the empirical label distribution, in nats.
pub fn marginal_entropy(labels: &[u8]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let n = labels.len() as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Raw history summaries for the tumor cohort at (unit, origin) pairs: the
/// windowed mean diameter driving assignment plus current state covariates.
/// Labels are the next treatment.
pub fn tumor_raw_features(
    cohort: &Cohort,
    pairs: &[(usize, usize)],
    diameter_window: usize,
) -> (Vec<Vec<f64>>, Vec<u8>) {
    let d_max = 13.0;
    let mut features = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for &(u, t) in pairs {
        let tr = &cohort.trajectories[u];
        let lo = (t + 1).saturating_sub(diameter_window);
        let window = &tr.outcomes[lo..=t];
        let mean_d: f64 =
            window.iter().map(|&v| diameter_from_volume(v)).sum::<f64>() / window.len() as f64;
        let mut f = vec![mean_d / d_max, diameter_from_volume(tr.outcomes[t]) / d_max];
        let k = cohort.meta.k_treatments;
        let mut onehot = vec![0.0; k];
        onehot[tr.treatments[t] as usize] = 1.0;
        f.extend(onehot);
        f.extend_from_slice(&tr.statics);
        features.push(f);
        labels.push(tr.treatments[t + 1]);
    }
    (features, labels)
}

/// Evenly spaced (unit, origin) pairs with a valid next step.
pub fn probe_pairs(cohort: &Cohort, stride: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (u, tr) in cohort.trajectories.iter().enumerate() {
        let mut t = 1usize;
        while t + 1 < tr.active_len {
            pairs.push((u, t));
            t += stride.max(1);
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_learns_separable_labels() {
        let features: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.3])
            .collect();
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let probe = fit_softmax_probe(&features, &labels, 2, 200, 0.1).unwrap();
        assert_eq!(probe.accuracy(&features, &labels), 1.0);
    }

    #[test]
    fn probe_on_noise_matches_majority() {
        let features: Vec<Vec<f64>> = (0..100).map(|_| vec![0.0, 0.0]).collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 4) as u8).collect();
        let probe = fit_softmax_probe(&features, &labels, 4, 100, 0.05).unwrap();
        let acc = probe.accuracy(&features, &labels);
        assert!((acc - majority_rate(&labels)).abs() < 0.26);
    }

    #[test]
    fn majority_and_entropy() {
        let labels = [0u8, 0, 1, 2];
        assert_eq!(majority_rate(&labels), 0.5);
        let h = marginal_entropy(&labels);
        let expect = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((h - expect).abs() < 1e-12);
    }
}
