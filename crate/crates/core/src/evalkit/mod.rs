//! Evaluation toolkit: counterfactual query generation, per-horizon error
//! metrics, early stopping, ablation orchestration, and the balance and
//! hidden-confounder diagnostics.

mod early_stop;
mod metrics;
mod pipeline;
mod probe;
mod queries;

pub use early_stop::{EarlyStop, StopSignal};
pub use metrics::{
    nrmse, nrmse_normalizer, read_report_csv, rmse_by_horizon, write_report_csv, EvalReport,
    HorizonStat, ParsedReportRow,
};
pub use pipeline::{
    build_queries, evaluate_rmse, mask_confounders, parallel_chunks, predict_queries,
    run_ablation, train_full_model, ExperimentData, TrainedModel,
};
pub use probe::{
    fit_softmax_probe, majority_rate, marginal_entropy, probe_pairs, tumor_raw_features, Probe,
};
pub use queries::{gen_queries_factual, gen_queries_random, gen_queries_sliding, CfQuery, Strategy};
