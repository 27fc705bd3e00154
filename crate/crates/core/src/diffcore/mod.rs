//! Minimal reverse-mode automatic differentiation over dense real arrays,
//! plus the optimizers and weight reparameterizations the model needs.

mod array;
mod gradcheck;
mod graph;
mod norm;
mod optim;
mod paramstore;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{DiffError, DiffResult, Gradients, Graph, ValueId, SELU_ALPHA, SELU_LAMBDA};
pub use norm::{initial_u, power_iterate, SpectralEstimate};
pub use optim::{
    adamw_step, sgd_coast, sgd_momentum_step, AdamWConfig, AdamWState, SgdMomentumState,
};
pub use paramstore::{GradMap, Param, ParamBinding, ParamStore};

pub(crate) use graph::{log_sum_exp_slice, stable_sigmoid};
