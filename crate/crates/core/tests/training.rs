//! Training-run oracles: smoke-scale checks that the two training stages
//! actually learn, measured against analytic baselines.

use cfseq_core::data::prepare;
use cfseq_core::decoder::train_decoder;
use cfseq_core::encoder::pretrain_encoder;
use cfseq_core::evalkit::{
    build_queries, evaluate_rmse, train_full_model, Strategy,
};
use cfseq_core::model::ModelConfig;
use cfseq_core::simkit::{simulate_split, GeneratorConfig, TumorConfig};

fn tumor_gen(gamma: f64, n: usize, max_len: usize, tau: usize) -> GeneratorConfig {
    GeneratorConfig::Tumor(TumorConfig {
        gamma,
        n_units: n,
        max_len,
        min_len: tau + 5,
        ..Default::default()
    })
}

#[test]
fn cpc_pretraining_beats_uniform_baseline() {
    // gamma = 1 cohort, tau = 10, encoder batch of 256 capped by the 200
    // available units: the trained contrastive loss must clear the uniform
    // baseline log(batch) by a wide margin.
    let gen = tumor_gen(1.0, 200, 60, 10);
    let (train, val, _) = simulate_split(&gen, 200, 40, 2, 11, 2).unwrap();
    let mcfg = ModelConfig {
        tau: 10,
        enc_batch: 256,
        enc_max_epochs: 150,
        enc_patience: 150,
        ..Default::default()
    };
    let prep_train = prepare(&train, &[]);
    let prep_val = prepare(&val, &[]);
    let (_, _, log) = pretrain_encoder(&prep_train, &prep_val, &mcfg, 5).unwrap();
    let tail: Vec<&cfseq_core::encoder::PretrainLogRow> = log.iter().rev().take(10).collect();
    let final_cpc = tail.iter().map(|r| r.loss_cpc).sum::<f64>() / tail.len() as f64;
    let baseline = (200.0f64).ln();
    assert!(
        final_cpc < baseline - 0.5,
        "final CPC loss {final_cpc} vs baseline {baseline}"
    );
}

#[test]
fn infomax_learns_above_uniform() {
    // 200 pretraining steps on a small cohort: the split-view loss must end
    // below log(batch size), i.e. any learning beats the uniform baseline.
    let gen = tumor_gen(1.0, 64, 30, 5);
    let (train, val, _) = simulate_split(&gen, 64, 16, 2, 3, 2).unwrap();
    let mcfg = ModelConfig {
        tau: 5,
        enc_batch: 64,
        enc_max_epochs: 200,
        enc_patience: 200,
        use_cpc: false,
        ..Default::default()
    };
    let prep_train = prepare(&train, &[]);
    let prep_val = prepare(&val, &[]);
    let (_, _, log) = pretrain_encoder(&prep_train, &prep_val, &mcfg, 8).unwrap();
    let tail: Vec<f64> = log.iter().rev().take(10).map(|r| r.loss_infomax).collect();
    let final_infomax = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(
        final_infomax < (64.0f64).ln(),
        "infomax loss {final_infomax} never beat uniform"
    );
}

#[test]
fn decoder_validation_mse_decreases_over_early_epochs() {
    let gen = tumor_gen(1.0, 100, 30, 5);
    let (train, val, _) = simulate_split(&gen, 100, 30, 2, 17, 2).unwrap();
    let mcfg = ModelConfig {
        tau: 5,
        enc_batch: 128,
        enc_max_epochs: 40,
        dec_batch: 64,
        dec_max_epochs: 21,
        dec_patience: 30,
        ..Default::default()
    };
    let prep_train = prepare(&train, &[]);
    let prep_val = prepare(&val, &[]);
    let (enc_store, _, _) = pretrain_encoder(&prep_train, &prep_val, &mcfg, 2).unwrap();
    let trained = train_decoder(&prep_train, &prep_val, &enc_store, &mcfg, 2).unwrap();
    let first = trained.log.first().unwrap().val_mse;
    let last = trained.log.last().unwrap().val_mse;
    assert!(
        last < first,
        "validation MSE did not improve over 20 epochs: {first} -> {last}"
    );
}

#[test]
fn overfit_model_nails_noise_free_counterfactuals() {
    // Noise-free simulator, 8 units, trained hard: one-step-ahead
    // counterfactual error below 5% of the outcome scale.
    let gen = GeneratorConfig::Tumor(TumorConfig {
        gamma: 1.0,
        n_units: 8,
        max_len: 16,
        min_len: 16,
        noise_sd: 0.0,
        ..Default::default()
    });
    let (train, _, _) = simulate_split(&gen, 8, 2, 2, 23, 1).unwrap();
    let mcfg = ModelConfig {
        tau: 1,
        z_dim: 12,
        c_dim: 12,
        r_dim: 12,
        enc_batch: 8,
        enc_max_epochs: 120,
        dec_batch: 8,
        dec_lr: 5e-3,
        dec_max_epochs: 800,
        dec_patience: 800,
        origin_frac: 1.0,
        ..Default::default()
    };
    let prep = prepare(&train, &[]);
    // Overfit deliberately: validate on the training units.
    let model = train_full_model(&prep, &prep, &mcfg, 4).unwrap();
    let queries = build_queries(&train, &gen, Strategy::Sliding, 1, 1).expect("queries");
    let rmse = evaluate_rmse(&model, &prep, &queries, 2).unwrap();
    let scaled = rmse[0] / train.meta.y_scale;
    assert!(scaled < 0.05, "tau=1 counterfactual error {scaled} of scale");
}
