//! Experiment composition: two-stage training, parallel counterfactual
//! evaluation, confounder masking, and ablation fan-out with shared seeds.

use super::metrics::{nrmse, nrmse_normalizer, rmse_by_horizon, EvalReport, HorizonStat};
use super::queries::{gen_queries_factual, gen_queries_random, gen_queries_sliding, CfQuery, Strategy};
use crate::data::{prepare, PreparedCohort};
use crate::decoder::{phi_rows_at, rollout_values, train_decoder, DecoderModel, TrainLogRow};
use crate::diffcore::{DiffError, DiffResult, ParamStore};
use crate::encoder::{pretrain_encoder, EncoderModel, PretrainLogRow};
use crate::model::{AblationVariant, Balancing, ModelConfig};
use crate::simkit::rng::substream;
use crate::simkit::{Cohort, GeneratorConfig, SimError};
use std::collections::BTreeMap;

/// A trained two-stage model plus its training history.
pub struct TrainedModel {
    pub store: ParamStore,
    pub enc: EncoderModel,
    pub dec: DecoderModel,
    pub pretrain_log: Vec<PretrainLogRow>,
    pub train_log: Vec<TrainLogRow>,
    pub aborted: bool,
}

/// Stage one followed by stage two under one seed. The naive-baseline flag
/// skips pretraining and balancing, leaving a plain factual regressor.
pub fn train_full_model(
    train: &PreparedCohort,
    val: &PreparedCohort,
    mcfg: &ModelConfig,
    seed: u64,
) -> DiffResult<TrainedModel> {
    let mut stage1 = mcfg.clone();
    if mcfg.naive_baseline {
        stage1.enc_max_epochs = 0;
    }
    let (enc_store, enc, pretrain_log) = pretrain_encoder(train, val, &stage1, seed)?;
    let mut stage2 = mcfg.clone();
    if mcfg.naive_baseline {
        stage2.balancing = Balancing::Off;
    }
    let trained = train_decoder(train, val, &enc_store, &stage2, seed)?;
    let dec = DecoderModel::handles(train.dims, &stage2);
    Ok(TrainedModel {
        store: trained.store,
        enc,
        dec,
        pretrain_log,
        train_log: trained.log,
        aborted: trained.aborted,
    })
}

/// Deterministic chunk-parallel map: output order is chunk order regardless
/// of worker count.
pub fn parallel_chunks<T: Sync, R: Send>(
    items: &[T],
    chunk: usize,
    workers: usize,
    f: impl Fn(&[T]) -> R + Sync,
) -> Vec<R> {
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let workers = workers.max(1).min(chunks.len().max(1));
    if workers <= 1 {
        return chunks.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..chunks.len()).map(|_| None).collect();
    let per = chunks.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_block) in slots.chunks_mut(per).enumerate() {
            let f = &f;
            let my_chunks = &chunks[w * per..(w * per + slot_block.len())];
            scope.spawn(move || {
                for (slot, c) in slot_block.iter_mut().zip(my_chunks) {
                    *slot = Some(f(c));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("chunk completed")).collect()
}

/// Predicts every query (unscaled outcomes). Prefix encodings are shared
/// across queries with the same (unit, origin).
pub fn predict_queries(
    store: &ParamStore,
    enc: &EncoderModel,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    y_scale: f64,
    queries: &[CfQuery],
    workers: usize,
) -> DiffResult<Vec<Vec<f64>>> {
    let mut unique: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for q in queries {
        let next = unique.len();
        unique.entry((q.unit_idx, q.origin)).or_insert(next);
    }
    let pairs: Vec<(usize, usize)> = {
        let mut v = vec![(0usize, 0usize); unique.len()];
        for (&pair, &i) in &unique {
            v[i] = pair;
        }
        v
    };
    let phi_chunks = parallel_chunks(&pairs, 256, workers, |chunk| {
        phi_rows_at(store, enc, dec, prep, chunk)
    });
    let mut phi_rows: Vec<Vec<f64>> = Vec::with_capacity(pairs.len());
    for chunk in phi_chunks {
        phi_rows.extend(chunk?);
    }

    let idx: Vec<usize> = (0..queries.len()).collect();
    let pred_chunks = parallel_chunks(&idx, 1024, workers, |chunk| -> DiffResult<Vec<Vec<f64>>> {
        let rows: Vec<(usize, usize)> = chunk.iter().map(|&i| (queries[i].unit_idx, queries[i].origin)).collect();
        let plans: Vec<Vec<u8>> = chunk.iter().map(|&i| queries[i].plan.clone()).collect();
        let phis: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| phi_rows[unique[&(queries[i].unit_idx, queries[i].origin)]].clone())
            .collect();
        rollout_values(store, dec, prep, &rows, &plans, &phis)
    });
    let mut out = Vec::with_capacity(queries.len());
    for chunk in pred_chunks {
        for row in chunk? {
            out.push(row.iter().map(|y| y * y_scale).collect());
        }
    }
    Ok(out)
}

/// Zeroes the listed covariate columns in the model inputs; simulator ground
/// truth stays untouched.
pub fn mask_confounders(cohort: &Cohort, indices: &[usize]) -> Result<Cohort, SimError> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= cohort.meta.d_x) {
        return Err(SimError::BadQuery(format!(
            "covariate index {bad} out of range for d_x = {}",
            cohort.meta.d_x
        )));
    }
    let mut out = cohort.clone();
    for tr in &mut out.trajectories {
        for row in &mut tr.covariates {
            for &i in indices {
                row[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Builds queries for a strategy. Random plans draw from the `queries`
/// substream of the data seed so every variant and model seed shares them.
pub fn build_queries(
    test: &Cohort,
    generator: &GeneratorConfig,
    strategy: Strategy,
    tau: usize,
    origin_stride: usize,
) -> Result<Vec<CfQuery>, SimError> {
    match strategy {
        Strategy::Sliding => gen_queries_sliding(test, generator, tau, origin_stride),
        Strategy::Random => {
            let mut rng = substream(test.meta.seed, "queries");
            gen_queries_random(test, generator, tau, origin_stride, &mut rng)
        }
        Strategy::Factual => Ok(gen_queries_factual(test, tau, origin_stride)),
    }
}

/// Per-horizon RMSE of one trained model on a query set.
pub fn evaluate_rmse(
    model: &TrainedModel,
    prep_test: &PreparedCohort,
    queries: &[CfQuery],
    workers: usize,
) -> DiffResult<Vec<f64>> {
    let preds = predict_queries(
        &model.store,
        &model.enc,
        &model.dec,
        prep_test,
        prep_test.y_scale,
        queries,
        workers,
    )?;
    rmse_by_horizon(&preds, queries).map_err(|e| DiffError::Invalid(e.to_string()))
}

/// Everything an experiment needs in memory.
pub struct ExperimentData {
    pub generator: GeneratorConfig,
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
}

impl ExperimentData {
    pub fn prepared(&self, masked: &[usize]) -> (PreparedCohort, PreparedCohort, PreparedCohort) {
        (
            prepare(&self.train, masked),
            prepare(&self.val, masked),
            prepare(&self.test, masked),
        )
    }
}

/// Trains and evaluates each variant with shared data, shared queries and
/// shared model seeds; reports mean per-horizon errors over seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    data: &ExperimentData,
    base: &ModelConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    strategy: Strategy,
    origin_stride: usize,
    workers: usize,
    config_fingerprint: &str,
) -> DiffResult<Vec<EvalReport>> {
    let mut effective = vec![AblationVariant::Full];
    for v in variants {
        if !effective.contains(v) {
            effective.push(*v);
        }
    }
    let (train, val, test) = data.prepared(&[]);
    let queries = build_queries(&data.test, &data.generator, strategy, base.tau, origin_stride)
        .map_err(|e| DiffError::Invalid(e.to_string()))?;
    let norm = nrmse_normalizer(&data.test);

    let mut reports = Vec::with_capacity(effective.len());
    for variant in effective {
        let mcfg = variant.apply(base);
        let mut rmse_acc: Vec<f64> = vec![0.0; base.tau];
        for &seed in seeds {
            let model = train_full_model(&train, &val, &mcfg, seed)?;
            let rmse = evaluate_rmse(&model, &test, &queries, workers)?;
            for (a, r) in rmse_acc.iter_mut().zip(&rmse) {
                *a += r;
            }
        }
        let mean_rmse: Vec<f64> = rmse_acc.iter().map(|r| r / seeds.len() as f64).collect();
        let nr = nrmse(&mean_rmse, norm).map_err(|e| DiffError::Invalid(e.to_string()))?;
        let per_horizon = mean_rmse
            .iter()
            .zip(&nr)
            .enumerate()
            .map(|(j, (&rmse, &nrmse))| HorizonStat {
                horizon: j + 1,
                rmse,
                nrmse,
                count: queries.len(),
            })
            .collect();
        reports.push(EvalReport {
            variant: variant.label().to_string(),
            per_horizon,
            norm_const: norm,
            seed_list: seeds.to_vec(),
            model_fingerprint: String::new(),
            config_fingerprint: config_fingerprint.to_string(),
        });
    }
    Ok(reports)
}
