//! Scaled model-side view of a cohort: per-step components U_t and targets,
//! with optional covariate masking for the hidden-confounder probe.

use crate::diffcore::Array;
use crate::model::ModelDims;
use crate::simkit::Cohort;

#[derive(Clone, Debug)]
pub struct PreparedUnit {
    /// U_t rows, one per active step (d_u wide), already scaled.
    pub u_rows: Vec<Vec<f64>>,
    /// Scaled outcomes.
    pub y: Vec<f64>,
    pub w: Vec<u8>,
    pub v: Vec<f64>,
    pub active_len: usize,
}

#[derive(Clone, Debug)]
pub struct PreparedCohort {
    pub dims: ModelDims,
    pub max_len: usize,
    pub y_scale: f64,
    pub units: Vec<PreparedUnit>,
}

/// Builds the model view. `masked_x` columns are zeroed in the inputs only;
/// outcomes and ground truth stay untouched.
pub fn prepare(cohort: &Cohort, masked_x: &[usize]) -> PreparedCohort {
    let meta = &cohort.meta;
    let dims = ModelDims { d_x: meta.d_x, d_v: meta.d_v, k: meta.k_treatments };
    let units = cohort
        .trajectories
        .iter()
        .map(|tr| {
            let y: Vec<f64> = tr.outcomes.iter().map(|&v| v / meta.y_scale).collect();
            let mut u_rows = Vec::with_capacity(tr.active_len);
            for t in 0..tr.active_len {
                let mut row = Vec::with_capacity(dims.d_u());
                row.extend_from_slice(&tr.statics);
                for (i, &x) in tr.covariates[t].iter().enumerate() {
                    let scaled = x / meta.x_scales[i];
                    row.push(if masked_x.contains(&i) { 0.0 } else { scaled });
                }
                let mut onehot = vec![0.0; dims.k];
                if t > 0 {
                    onehot[tr.treatments[t - 1] as usize] = 1.0;
                }
                row.extend_from_slice(&onehot);
                row.push(if t > 0 { y[t - 1] } else { 0.0 });
                u_rows.push(row);
            }
            PreparedUnit {
                u_rows,
                y,
                w: tr.treatments.clone(),
                v: tr.statics.clone(),
                active_len: tr.active_len,
            }
        })
        .collect();
    PreparedCohort { dims, max_len: meta.max_len, y_scale: meta.y_scale, units }
}

impl PreparedCohort {
    /// Stacked U_t for one step over the given units; inactive rows zero.
    pub fn u_array(&self, unit_idxs: &[usize], t: usize) -> Array {
        let d_u = self.dims.d_u();
        let mut data = vec![0.0; unit_idxs.len() * d_u];
        for (r, &ui) in unit_idxs.iter().enumerate() {
            let unit = &self.units[ui];
            if t < unit.active_len {
                data[r * d_u..(r + 1) * d_u].copy_from_slice(&unit.u_rows[t]);
            }
        }
        Array::new(vec![unit_idxs.len(), d_u], data)
    }

    /// Per-row activity mask [B, 1] for one step.
    pub fn mask_array(&self, unit_idxs: &[usize], t: usize) -> Array {
        let data = unit_idxs
            .iter()
            .map(|&ui| (t < self.units[ui].active_len) as u8 as f64)
            .collect();
        Array::new(vec![unit_idxs.len(), 1], data)
    }

    pub fn longest_active(&self, unit_idxs: &[usize]) -> usize {
        unit_idxs.iter().map(|&ui| self.units[ui].active_len).max().unwrap_or(0)
    }
}
