//! Optimizers: decoupled-weight-decay adaptive moments for the encoder and
//! outcome decoder, momentum SGD for the treatment sub-network.
//!
//! Steps are deterministic functions of (params, grads, state, hypers). A
//! non-finite gradient rejects the whole step before anything is mutated.

use super::array::Array;
use super::graph::{DiffError, DiffResult};
use super::paramstore::{GradMap, ParamStore};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Default::default() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
    step: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW step over every entry of `grads`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> DiffResult<()> {
    assert!((0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2));
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(DiffError::NonFiniteGrad(name.clone()));
        }
        if params.get(name).shape() != g.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "adamw_step",
                lhs: params.get(name).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        let p = params.get_mut(name);
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - cfg.lr * cfg.weight_decay * pi - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct SgdMomentumState {
    velocity: BTreeMap<String, Array>,
    step: u64,
}

impl SgdMomentumState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// v <- momentum * v + g; p <- p - lr * v.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut SgdMomentumState,
    lr: f64,
    momentum: f64,
) -> DiffResult<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(DiffError::NonFiniteGrad(name.clone()));
        }
    }
    state.step += 1;
    for (name, g) in grads {
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        let p = params.get_mut(name);
        for i in 0..g.len() {
            let vi = momentum * v.data()[i] + g.data()[i];
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * vi;
        }
    }
    Ok(())
}

/// Advance velocity-only parameters (zero gradient but nonzero velocity still
/// moves the parameter). Exposed for completeness; `sgd_momentum_step` with an
/// all-zero grad map entry does the same.
pub fn sgd_coast(params: &mut ParamStore, names: &[String], state: &mut SgdMomentumState, lr: f64, momentum: f64) {
    let zero_grads: GradMap = names
        .iter()
        .map(|n| (n.clone(), Array::zeros(params.get(n).shape())))
        .collect();
    sgd_momentum_step(params, &zero_grads, state, lr, momentum).expect("zero grads are finite");
}
