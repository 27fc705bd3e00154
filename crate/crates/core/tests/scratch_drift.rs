//! Temporary diagnostic: drift under sustained no-treatment plans.

use cfseq_core::checkpoint::load_checkpoint;
use cfseq_core::data::prepare;
use cfseq_core::decoder::{predict_rows, DecoderModel};
use cfseq_core::encoder::EncoderModel;
use cfseq_core::model::ModelConfig;
use cfseq_core::simkit::{ground_truth_counterfactual, read_cohort, TumorConfig};
use std::path::Path;

#[test]
#[ignore]
fn diagnose_no_treatment_drift() {
    let dir = Path::new("/tmp/cal/t10f");
    let (test, _) = read_cohort(&dir.join("data"), "test").unwrap();
    let cfg = TumorConfig { gamma: 1.0, ..Default::default() };
    let (store, meta) = load_checkpoint(&dir.join("model/model_s2.ckpt")).unwrap();
    let mut mcfg = ModelConfig::default();
    meta.apply_to(&mut mcfg);
    let enc = EncoderModel::handles(meta.dims, &mcfg);
    let dec = DecoderModel::handles(meta.dims, &mcfg);
    let prep = prepare(&test, &[]);

    // Mid-size tumors at origins with at least 11 remaining steps.
    let vmax = cfg.v_max();
    let mut rows = Vec::new();
    for (u, tr) in test.trajectories.iter().enumerate() {
        for t in (5..tr.active_len.saturating_sub(11)).step_by(7) {
            let v0 = tr.outcomes[t] / vmax;
            if (0.1..0.7).contains(&v0) {
                rows.push((u, t));
            }
        }
    }
    rows.truncate(200);
    println!("{} probe rows", rows.len());
    let plans: Vec<Vec<u8>> = rows.iter().map(|_| vec![0u8; 10]).collect();
    let preds = predict_rows(&store, &enc, &dec, &prep, &rows, Some(&plans)).unwrap();

    // Mean relative trajectory: prediction / V0 and truth / V0 per horizon.
    let mut mean_pred = vec![0.0; 10];
    let mut mean_gt = vec![0.0; 10];
    for (&(u, t), pred) in rows.iter().zip(&preds) {
        let tr = &test.trajectories[u];
        let v0 = tr.outcomes[t];
        let gt = ground_truth_counterfactual(&cfg, tr, t, &vec![0u8; 10]).unwrap();
        for j in 0..10 {
            mean_pred[j] += pred[j] * vmax / v0;
            mean_gt[j] += gt[j] / v0;
        }
    }
    let n = rows.len() as f64;
    println!("horizon, mean pred/V0, mean truth/V0");
    for j in 0..10 {
        println!("h{}: {:.4} vs {:.4}", j + 1, mean_pred[j] / n, mean_gt[j] / n);
    }
}
