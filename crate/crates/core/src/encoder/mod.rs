//! History encoder: local feature network, context GRU, multi-horizon
//! contrastive prediction, and the split-view information-maximization
//! regularizer, trained as stage one.

use crate::data::PreparedCohort;
use crate::diffcore::{
    adamw_step, AdamWConfig, AdamWState, Array, DiffError, DiffResult, GradMap, Graph,
    ParamBinding, ParamStore, ValueId,
};
use crate::evalkit::{EarlyStop, StopSignal};
use crate::model::{MiKind, ModelConfig, ModelDims};
use crate::nn::{uniform_init, GruCell, WnAffine};
use crate::simkit::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;

pub const ENC_PREFIXES: [&str; 4] = ["enc.local.", "enc.ctx.", "enc.cpc.", "enc.infomax."];
/// The parameter groups the decoder stage fine-tunes (theta_1, theta_2).
pub const ENC_FINETUNE_PREFIXES: [&str; 2] = ["enc.local.", "enc.ctx."];

/// Layer handles of the encoder; parameters live in the store under `enc.*`.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub dims: ModelDims,
    pub z_dim: usize,
    pub c_dim: usize,
    pub tau: usize,
    local1: WnAffine,
    local2: WnAffine,
    ctx: GruCell,
    infomax1: crate::nn::Affine,
    infomax2: crate::nn::Affine,
}

impl EncoderModel {
    pub fn init(store: &mut ParamStore, dims: ModelDims, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d_u = dims.d_u();
        let local1 = WnAffine::init(store, "enc.local.l1", d_u, cfg.z_dim, rng);
        let local2 = WnAffine::init(store, "enc.local.l2", cfg.z_dim, cfg.z_dim, rng);
        let ctx = GruCell::init(store, "enc.ctx.gru", cfg.z_dim, cfg.c_dim, rng);
        for j in 0..cfg.tau {
            store.insert(
                format!("enc.cpc.gamma{j}"),
                uniform_init(&[cfg.z_dim, cfg.c_dim], cfg.z_dim, rng),
            );
        }
        let infomax1 = crate::nn::Affine::init(store, "enc.infomax.l1", cfg.c_dim, cfg.c_dim, rng);
        let infomax2 = crate::nn::Affine::init(store, "enc.infomax.l2", cfg.c_dim, cfg.c_dim, rng);
        EncoderModel {
            dims,
            z_dim: cfg.z_dim,
            c_dim: cfg.c_dim,
            tau: cfg.tau,
            local1,
            local2,
            ctx,
            infomax1,
            infomax2,
        }
    }

    /// Rebuilds the handles for an existing parameter store (names are
    /// deterministic).
    pub fn handles(dims: ModelDims, cfg: &ModelConfig) -> Self {
        let d_u = dims.d_u();
        EncoderModel {
            dims,
            z_dim: cfg.z_dim,
            c_dim: cfg.c_dim,
            tau: cfg.tau,
            local1: WnAffine { name: "enc.local.l1".into(), d_in: d_u, d_out: cfg.z_dim },
            local2: WnAffine { name: "enc.local.l2".into(), d_in: cfg.z_dim, d_out: cfg.z_dim },
            ctx: GruCell { name: "enc.ctx.gru".into(), d_in: cfg.z_dim, d_h: cfg.c_dim },
            infomax1: crate::nn::Affine { name: "enc.infomax.l1".into(), d_in: cfg.c_dim, d_out: cfg.c_dim },
            infomax2: crate::nn::Affine { name: "enc.infomax.l2".into(), d_in: cfg.c_dim, d_out: cfg.c_dim },
        }
    }

    /// Local feature network: affine/weight-norm, SELU, affine/weight-norm.
    pub fn encode_local(&self, g: &mut Graph, b: &ParamBinding, u: ValueId) -> DiffResult<ValueId> {
        if g.shape(u) != [g.shape(u)[0], self.dims.d_u()] {
            return Err(DiffError::ShapeMismatch {
                op: "encode_local",
                lhs: g.shape(u).to_vec(),
                rhs: vec![self.dims.d_u()],
            });
        }
        let h = self.local1.apply(g, b, u)?;
        let a = g.selu(h)?;
        self.local2.apply(g, b, a)
    }

    /// One context GRU step.
    pub fn gru_step(&self, g: &mut Graph, b: &ParamBinding, z: ValueId, h: ValueId) -> DiffResult<ValueId> {
        self.ctx.step(g, b, z, h)
    }

    /// Runs the context GRU over per-step local features; masked steps pass
    /// the hidden state through. Returns the hidden state after every step.
    pub fn encode_context(
        &self,
        g: &mut Graph,
        b: &ParamBinding,
        z_steps: &[ValueId],
        masks: Option<&[Array]>,
    ) -> DiffResult<Vec<ValueId>> {
        if z_steps.is_empty() {
            return Err(DiffError::Invalid("encode_context on empty sequence".into()));
        }
        let batch = g.shape(z_steps[0])[0];
        let mut h = g.constant(Array::zeros(&[batch, self.c_dim]));
        let mut out = Vec::with_capacity(z_steps.len());
        for (t, &z) in z_steps.iter().enumerate() {
            h = match masks {
                Some(ms) => self.ctx.masked_step(g, b, z, h, &ms[t])?,
                None => self.ctx.step(g, b, z, h)?,
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Split-view predictor F_eta: affine, SELU, affine.
    pub fn infomax_predictor(&self, g: &mut Graph, b: &ParamBinding, c_h: ValueId) -> DiffResult<ValueId> {
        let a = self.infomax1.apply(g, b, c_h)?;
        let s = g.selu(a)?;
        self.infomax2.apply(g, b, s)
    }
}

/// InfoNCE with in-batch negatives from a square score matrix whose diagonal
/// holds the positives: mean over rows of (LSE(row) - diag).
pub fn infonce_from_scores(g: &mut Graph, scores: ValueId) -> DiffResult<ValueId> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(DiffError::Invalid(format!(
            "InfoNCE needs a square score matrix with n >= 2, got {shape:?}"
        )));
    }
    let n = shape[0];
    let idx: Vec<usize> = (0..n).collect();
    let diag = g.one_hot_gather(scores, &idx)?;
    let lse = g.log_sum_exp(scores)?;
    let per_row = g.sub(lse, diag)?;
    g.mean(per_row)
}

/// Alternative mutual-information objectives over a diagonal-positive score
/// matrix. Returns the bound value (to be maximized). Off-diagonal terms are
/// handled through log-sum-exp so large scores cannot overflow.
pub fn mi_lower_bound_alt(g: &mut Graph, scores: ValueId, kind: MiKind) -> DiffResult<ValueId> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(DiffError::Invalid(format!(
            "MI bound needs a square score matrix with n >= 2, got {shape:?}"
        )));
    }
    let n = shape[0];
    let idx: Vec<usize> = (0..n).collect();
    let diag = g.one_hot_gather(scores, &idx)?;
    let joint = g.mean(diag)?;

    // Mask the diagonal far down so exp contributes exactly zero there.
    let mut mask = Array::zeros(&[n, n]);
    for i in 0..n {
        mask.set2(i, i, -1e30);
    }
    let mask_node = g.constant(mask);
    let masked = g.add(scores, mask_node)?;
    let count = (n * (n - 1)) as f64;
    match kind {
        MiKind::InfoNce => {
            let loss = infonce_from_scores(g, scores)?;
            // log n - loss, the usual lower-bound estimate.
            let neg = g.scale(loss, -1.0)?;
            g.shift(neg, (n as f64).ln())
        }
        MiKind::Nwj => {
            // E_p[T] - mean_offdiag e^{T-1}
            let shifted = g.shift(masked, -1.0)?;
            let row_lse = g.log_sum_exp(shifted)?;
            let lse = g.log_sum_exp(row_lse)?;
            let log_mean = g.shift(lse, -count.ln())?;
            let mean_exp = g.exp(log_mean)?;
            let neg = g.scale(mean_exp, -1.0)?;
            g.add(joint, neg)
        }
        MiKind::Mine => {
            // E_p[T] - log mean_offdiag e^T
            let row_lse = g.log_sum_exp(masked)?;
            let lse = g.log_sum_exp(row_lse)?;
            let log_mean = g.shift(lse, -count.ln())?;
            let neg = g.scale(log_mean, -1.0)?;
            g.add(joint, neg)
        }
    }
}

/// Score matrix for CPC horizon j: rows are anchors i, columns candidates l,
/// S[i, l] = z_{l, t+j}^T Gamma_j c_i.
fn cpc_scores(
    g: &mut Graph,
    b: &ParamBinding,
    j: usize,
    z_future: ValueId,
    c_anchor: ValueId,
) -> DiffResult<ValueId> {
    let gamma = b.id(&format!("enc.cpc.gamma{j}"));
    let projected = g.matmul(z_future, gamma)?; // [B, c_dim]
    g.matmul_nt(c_anchor, projected) // [B(anchor), B(candidate)]
}

/// Per-horizon contrastive objective value, as a loss to minimize.
fn horizon_loss(g: &mut Graph, scores: ValueId, kind: MiKind) -> DiffResult<ValueId> {
    match kind {
        MiKind::InfoNce => infonce_from_scores(g, scores),
        other => {
            let bound = mi_lower_bound_alt(g, scores, other)?;
            g.scale(bound, -1.0)
        }
    }
}

/// Both pretraining terms for one batch at one anchor/split draw.
pub struct EncoderBatchLoss {
    pub total: ValueId,
    pub cpc_value: f64,
    pub infomax_value: f64,
}

/// Builds L_cpc + L_infomax for the units at anchor `a` (0-based, per-unit
/// targets at a+1..=a+tau must be active) and split `s0` in [0, a).
pub fn encoder_batch_loss(
    g: &mut Graph,
    b: &ParamBinding,
    model: &EncoderModel,
    prep: &PreparedCohort,
    units: &[usize],
    a: usize,
    s0: usize,
    mcfg: &ModelConfig,
) -> DiffResult<EncoderBatchLoss> {
    if units.len() < 2 {
        return Err(DiffError::Invalid("contrastive batch needs at least 2 units".into()));
    }
    let tau = model.tau;
    // Local features for steps 0..=a+tau.
    let mut z_steps = Vec::with_capacity(a + tau + 1);
    for t in 0..=a + tau {
        let u = g.constant(prep.u_array(units, t));
        z_steps.push(model.encode_local(g, b, u)?);
    }
    let mut terms: Vec<ValueId> = Vec::new();
    let mut cpc_value = 0.0;
    let mut infomax_value = 0.0;

    if mcfg.use_cpc {
        let c_all = model.encode_context(g, b, &z_steps[..=a], None)?;
        let c_anchor = c_all[a];
        let mut horizon_terms = Vec::with_capacity(tau);
        for j in 1..=tau {
            let scores = cpc_scores(g, b, j - 1, z_steps[a + j], c_anchor)?;
            horizon_terms.push(horizon_loss(g, scores, mcfg.mi)?);
        }
        let mut acc = horizon_terms[0];
        for &t in &horizon_terms[1..] {
            acc = g.add(acc, t)?;
        }
        let cpc = g.scale(acc, 1.0 / tau as f64)?;
        cpc_value = g.value(cpc).item();
        terms.push(cpc);
    }

    if mcfg.use_infomax {
        // Two disjoint views encoded with fresh hidden states.
        let c_hist = model.encode_context(g, b, &z_steps[..=s0], None)?;
        let c_fut = model.encode_context(g, b, &z_steps[s0 + 1..=a], None)?;
        let c_h = *c_hist.last().unwrap();
        let c_f = *c_fut.last().unwrap();
        let c_f_hat = model.infomax_predictor(g, b, c_h)?;
        let scores = g.matmul_nt(c_f_hat, c_f)?; // S[i, l] = c_f_l . F(c_h_i)
        let infomax = horizon_loss(g, scores, mcfg.mi)?;
        infomax_value = g.value(infomax).item();
        terms.push(infomax);
    }

    let total = match terms.len() {
        0 => return Err(DiffError::Invalid("encoder loss needs cpc or infomax enabled".into())),
        1 => terms[0],
        _ => g.add(terms[0], terms[1])?,
    };
    Ok(EncoderBatchLoss { total, cpc_value, infomax_value })
}

#[derive(Clone, Debug)]
pub struct PretrainLogRow {
    pub epoch: usize,
    pub loss_cpc: f64,
    pub loss_infomax: f64,
    pub val_loss: f64,
}

/// Highest 0-based anchor so that a+tau fits under the cohort maximum with
/// one step to spare.
fn max_anchor(max_len: usize, tau: usize) -> usize {
    max_len.saturating_sub(tau + 2).max(1)
}

fn eligible_units(prep: &PreparedCohort, pool: &[usize], a: usize, tau: usize) -> Vec<usize> {
    pool.iter().copied().filter(|&u| prep.units[u].active_len > a + tau).collect()
}

/// Draws (anchor, split) so that at least two pool units stay eligible.
fn draw_anchor(
    prep: &PreparedCohort,
    pool: &[usize],
    tau: usize,
    rng: &mut impl Rng,
) -> Option<(usize, usize, Vec<usize>)> {
    let hi = max_anchor(prep.max_len, tau);
    for _ in 0..64 {
        let a = rng.random_range(1..=hi);
        let s0 = rng.random_range(0..a);
        let elig = eligible_units(prep, pool, a, tau);
        if elig.len() >= 2 {
            return Some((a, s0, elig));
        }
    }
    None
}

/// Stage-one training: minimizes the CPC and InfoMax terms with the adaptive
/// optimizer, early-stopping on a fixed validation schedule. Returns the
/// best-validation parameters and the per-epoch log.
pub fn pretrain_encoder(
    train: &PreparedCohort,
    val: &PreparedCohort,
    mcfg: &ModelConfig,
    seed: u64,
) -> DiffResult<(ParamStore, EncoderModel, Vec<PretrainLogRow>)> {
    let dims = train.dims;
    let mut init_rng = substream(seed, "enc.init");
    let mut store = ParamStore::new();
    let model = EncoderModel::init(&mut store, dims, mcfg, &mut init_rng);
    let names = store.trainable_names_with_prefix(&ENC_PREFIXES);

    let mut log = Vec::new();
    if mcfg.enc_max_epochs == 0 || mcfg.naive_baseline {
        return Ok((store, model, log));
    }

    // Fixed validation schedule: one (anchor, split) per validation chunk.
    let mut val_rng = substream(seed, "enc.val");
    let val_idx: Vec<usize> = (0..val.units.len()).collect();
    let val_batches: Vec<(Vec<usize>, usize, usize)> = val_idx
        .chunks(mcfg.enc_batch)
        .filter_map(|chunk| {
            draw_anchor(val, chunk, mcfg.tau, &mut val_rng).map(|(a, s0, elig)| (elig, a, s0))
        })
        .collect();
    if val_batches.is_empty() {
        return Err(DiffError::Invalid("validation set too small for pretraining".into()));
    }

    let mut batch_rng = substream(seed, "enc.batch");
    let mut opt_state = AdamWState::new();
    let opt_cfg = AdamWConfig {
        lr: mcfg.enc_lr,
        weight_decay: mcfg.weight_decay,
        ..Default::default()
    };
    let mut monitor = EarlyStop::new(mcfg.enc_min_delta, mcfg.enc_patience);
    let mut best = store.clone();
    let mut order: Vec<usize> = (0..train.units.len()).collect();

    for epoch in 0..mcfg.enc_max_epochs {
        order.shuffle(&mut batch_rng);
        let mut cpc_sum = 0.0;
        let mut infomax_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(mcfg.enc_batch) {
            let Some((a, s0, elig)) = draw_anchor(train, chunk, mcfg.tau, &mut batch_rng) else {
                continue;
            };
            let mut g = Graph::new();
            let binding = store.bind_all(&mut g);
            let loss = encoder_batch_loss(&mut g, &binding, &model, train, &elig, a, s0, mcfg)?;
            if !g.value(loss.total).item().is_finite() {
                return Err(DiffError::Invalid(format!(
                    "non-finite encoder loss at epoch {epoch} (cpc {}, infomax {})",
                    loss.cpc_value, loss.infomax_value
                )));
            }
            let grads = g.backward(loss.total)?;
            let mut grad_map = binding.extract_grads(&g, &grads, &names);
            clip_grads(&mut grad_map, mcfg.grad_clip);
            adamw_step(&mut store, &grad_map, &mut opt_state, &opt_cfg)?;
            cpc_sum += loss.cpc_value;
            infomax_sum += loss.infomax_value;
            n_batches += 1;
        }

        let val_loss = encoder_validation_loss(&store, &model, val, &val_batches, mcfg)?;
        log.push(PretrainLogRow {
            epoch,
            loss_cpc: cpc_sum / n_batches.max(1) as f64,
            loss_infomax: infomax_sum / n_batches.max(1) as f64,
            val_loss,
        });
        let signal = monitor.update(val_loss);
        if monitor.last_was_best() {
            best = store.clone();
        }
        if signal == StopSignal::Stop {
            break;
        }
    }
    Ok((best, model, log))
}

pub fn encoder_validation_loss(
    store: &ParamStore,
    model: &EncoderModel,
    val: &PreparedCohort,
    schedule: &[(Vec<usize>, usize, usize)],
    mcfg: &ModelConfig,
) -> DiffResult<f64> {
    let mut total = 0.0;
    for (units, a, s0) in schedule {
        let mut g = Graph::new();
        let binding = store.bind(&mut g, |_| false);
        let loss = encoder_batch_loss(&mut g, &binding, model, val, units, *a, *s0, mcfg)?;
        total += g.value(loss.total).item();
    }
    Ok(total / schedule.len() as f64)
}

/// Scales every gradient so the global norm stays under the clip, when set.
pub fn clip_grads(grads: &mut GradMap, clip: Option<f64>) {
    let Some(c) = clip else { return };
    let norm: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > c {
        let scale = c / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
}
