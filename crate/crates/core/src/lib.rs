//! Counterfactual sequence regression laboratory.
//!
//! The crate hosts four layers:
//! - [`diffcore`]: reverse-mode differentiation, optimizers, normalizations;
//! - [`simkit`]: confounded longitudinal cohort generators with exact
//!   potential-outcome rollouts;
//! - [`encoder`] / [`decoder`]: the contrastive recurrent history encoder and
//!   the balance-regularized autoregressive outcome decoder;
//! - [`evalkit`]: counterfactual query generation, per-horizon metrics,
//!   ablation orchestration and the diagnostics around them.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod simkit;

pub use diffcore::{Array, DiffError, DiffResult, Graph, ParamStore, ValueId};
