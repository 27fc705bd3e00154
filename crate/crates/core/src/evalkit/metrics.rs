//! Per-horizon error metrics and the evaluation report.

use super::queries::CfQuery;
use crate::simkit::{write_atomic, Cohort, SimError};
use std::path::Path;

/// RMSE per horizon over queries with ground truth; predictions and truths
/// both unscaled. Rejects queries without ground truth.
pub fn rmse_by_horizon(predictions: &[Vec<f64>], queries: &[CfQuery]) -> Result<Vec<f64>, SimError> {
    assert_eq!(predictions.len(), queries.len());
    if queries.is_empty() {
        return Ok(vec![]);
    }
    let tau = queries[0].plan.len();
    let mut se = vec![0.0f64; tau];
    let mut n = vec![0usize; tau];
    for (pred, q) in predictions.iter().zip(queries) {
        let gt = q
            .ground_truth
            .as_ref()
            .ok_or_else(|| SimError::BadQuery("query without ground truth".into()))?;
        for j in 0..tau {
            let err = pred[j] - gt[j];
            se[j] += err * err;
            n[j] += 1;
        }
    }
    Ok(se
        .iter()
        .zip(&n)
        .map(|(&s, &c)| (s / c as f64).sqrt())
        .collect())
}

/// Elementwise division by a positive normalization constant.
pub fn nrmse(rmse: &[f64], normalization: f64) -> Result<Vec<f64>, SimError> {
    if normalization <= 0.0 {
        return Err(SimError::BadQuery(format!(
            "normalization must be positive, got {normalization}"
        )));
    }
    Ok(rmse.iter().map(|r| r / normalization).collect())
}

/// Normalization constant used in reports: one percent of the maximum
/// outcome over the test cohort, i.e. NRMSE is error as a percentage of the
/// outcome ceiling (the convention of the recurrent counterfactual
/// regression lineage this lab follows). Recorded in every report.
pub fn nrmse_normalizer(test: &Cohort) -> f64 {
    test.max_outcome() / 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonStat {
    pub horizon: usize,
    pub rmse: f64,
    pub nrmse: f64,
    pub count: usize,
}

/// Per-horizon error statistics with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub per_horizon: Vec<HorizonStat>,
    pub norm_const: f64,
    pub seed_list: Vec<u64>,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn mean_nrmse(&self) -> f64 {
        let s: f64 = self.per_horizon.iter().map(|h| h.nrmse).sum();
        s / self.per_horizon.len() as f64
    }

    pub fn csv_header() -> &'static str {
        "variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const"
    }

    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        for h in &self.per_horizon {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.variant,
                h.horizon,
                h.rmse,
                h.nrmse,
                h.count,
                self.seed_list.len(),
                self.norm_const
            ));
        }
        out
    }
}

pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> std::io::Result<()> {
    let mut out = String::from(EvalReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.to_csv_rows());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, &out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReportRow {
    pub variant: String,
    pub horizon: usize,
    pub rmse: f64,
    pub nrmse: f64,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ParsedReportRow>, SimError> {
    let text = std::fs::read_to_string(path).map_err(SimError::Io)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(SimError::BadFile(format!("report row has {} fields", f.len())));
        }
        rows.push(ParsedReportRow {
            variant: f[0].to_string(),
            horizon: f[1].parse().map_err(|_| SimError::BadFile("horizon".into()))?,
            rmse: f[2].parse().map_err(|_| SimError::BadFile("rmse".into()))?,
            nrmse: f[3].parse().map_err(|_| SimError::BadFile("nrmse".into()))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::queries::Strategy;

    fn q(gt: Vec<f64>) -> CfQuery {
        CfQuery {
            unit_id: 0,
            unit_idx: 0,
            origin: 0,
            plan: vec![0; gt.len()],
            ground_truth: Some(gt),
            strategy: Strategy::Sliding,
        }
    }

    #[test]
    fn perfect_predictions_zero_rmse() {
        let queries = vec![q(vec![1.0, 2.0]), q(vec![3.0, 4.0])];
        let preds = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(rmse_by_horizon(&preds, &queries).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_query_rmse_is_absolute_error() {
        let queries = vec![q(vec![1.0, 2.0])];
        let preds = vec![vec![1.3, 2.4]];
        let rmse = rmse_by_horizon(&preds, &queries).unwrap();
        assert!((rmse[0] - 0.3).abs() < 1e-12);
        assert!((rmse[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_query_hand_arithmetic() {
        let queries = vec![q(vec![0.0]), q(vec![0.0])];
        let preds = vec![vec![1.0], vec![0.0]];
        let rmse = rmse_by_horizon(&preds, &queries).unwrap();
        assert!((rmse[0] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_is_permutation_invariant() {
        let queries = vec![q(vec![1.0]), q(vec![2.0]), q(vec![5.0])];
        let preds = vec![vec![1.5], vec![2.5], vec![4.0]];
        let a = rmse_by_horizon(&preds, &queries).unwrap();
        let perm = [2usize, 0, 1];
        let qp: Vec<CfQuery> = perm.iter().map(|&i| queries[i].clone()).collect();
        let pp: Vec<Vec<f64>> = perm.iter().map(|&i| preds[i].clone()).collect();
        let b = rmse_by_horizon(&pp, &qp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_ground_truth_rejected() {
        let mut query = q(vec![1.0]);
        query.ground_truth = None;
        assert!(rmse_by_horizon(&[vec![1.0]], &[query]).is_err());
    }

    #[test]
    fn nrmse_arithmetic_and_guards() {
        let out = nrmse(&[1.0], 13.0).unwrap();
        assert!((out[0] - 0.076923).abs() < 1e-6);
        assert_eq!(nrmse(&[2.0, 4.0], 1.0).unwrap(), vec![2.0, 4.0]);
        assert!(nrmse(&[1.0], 0.0).is_err());
    }

    #[test]
    fn nrmse_scale_invariance() {
        // Scaling outcomes and predictions by c scales rmse and the
        // normalizer equally.
        let queries = vec![q(vec![1.0, 2.0]), q(vec![3.0, 1.0])];
        let preds = vec![vec![1.2, 2.5], vec![2.5, 1.5]];
        let rmse = rmse_by_horizon(&preds, &queries).unwrap();
        let base = nrmse(&rmse, 10.0).unwrap();
        let c = 7.3;
        let qs: Vec<CfQuery> = queries
            .iter()
            .map(|query| {
                let mut query = query.clone();
                query.ground_truth = Some(
                    query.ground_truth.unwrap().iter().map(|g| g * c).collect(),
                );
                query
            })
            .collect();
        let ps: Vec<Vec<f64>> = preds
            .iter()
            .map(|p| p.iter().map(|v| v * c).collect())
            .collect();
        let rmse_scaled = rmse_by_horizon(&ps, &qs).unwrap();
        let scaled = nrmse(&rmse_scaled, 10.0 * c).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_csv_roundtrip() {
        let report = EvalReport {
            variant: "full".into(),
            per_horizon: vec![
                HorizonStat { horizon: 1, rmse: 9.5, nrmse: 0.83, count: 120 },
                HorizonStat { horizon: 2, rmse: 10.1, nrmse: 0.88, count: 120 },
            ],
            norm_const: 11.5,
            seed_list: vec![1, 2, 3],
            model_fingerprint: "mf".into(),
            config_fingerprint: "cf".into(),
        };
        let dir = std::env::temp_dir().join(format!("cfseq-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("report.csv");
        write_report_csv(&path, &[report.clone()]).unwrap();
        let rows = read_report_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].variant, "full");
        assert_eq!(rows[1].nrmse, 0.88);
        std::fs::remove_dir_all(&dir).ok();
    }
}
