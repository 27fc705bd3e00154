//! Balanced autoregressive decoder: maps the context into a representation,
//! rolls outcome predictions forward under a treatment plan without teacher
//! forcing, and plays the upper-bound balancing game against the treatment
//! classifier (stage two).

use crate::data::PreparedCohort;
use crate::diffcore::{
    adamw_step, sgd_momentum_step, AdamWConfig, AdamWState, Array, DiffError, DiffResult, Graph,
    ParamBinding, ParamStore, SgdMomentumState, ValueId,
};
use crate::encoder::{clip_grads, EncoderModel, ENC_FINETUNE_PREFIXES};
use crate::evalkit::{EarlyStop, StopSignal};
use crate::model::{Balancing, ModelConfig, ModelDims};
use crate::nn::{cross_entropy_mean, floored_log_softmax_gather, one_hot_rows, Affine, GruCell, SnAffine, WnAffine};
use crate::simkit::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;

pub const DEC_MAIN_PREFIXES: [&str; 4] = ["dec.repr.", "dec.gru.", "dec.plan.", "dec.out."];
pub const DEC_TREAT_PREFIX: &str = "dec.treat.";

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub dims: ModelDims,
    pub r_dim: usize,
    pub tau: usize,
    repr_head: Affine,
    repr_roll: Affine,
    gru: GruCell,
    plan: GruCell,
    out1: WnAffine,
    out2: WnAffine,
    cls1: SnAffine,
    cls2: SnAffine,
}

impl DecoderModel {
    fn shapes(dims: ModelDims, cfg: &ModelConfig) -> (usize, usize) {
        // Decoder GRU input: [one-hot treatment, plan-encoder hidden,
        // previous prediction, static covariates].
        let d_in = dims.k + cfg.plan_hidden + 1 + dims.d_v;
        (d_in, dims.k)
    }

    pub fn init(store: &mut ParamStore, dims: ModelDims, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (gru_in, k) = Self::shapes(dims, cfg);
        DecoderModel {
            dims,
            r_dim: cfg.r_dim,
            tau: cfg.tau,
            repr_head: Affine::init(store, "dec.repr.head", cfg.c_dim, cfg.r_dim, rng),
            repr_roll: Affine::init(store, "dec.repr.roll", cfg.r_dim, cfg.r_dim, rng),
            gru: GruCell::init(store, "dec.gru.main", gru_in, cfg.r_dim, rng),
            plan: GruCell::init(store, "dec.plan.gru", k, cfg.plan_hidden, rng),
            out1: WnAffine::init(store, "dec.out.l1", cfg.r_dim + k, cfg.fc_hidden, rng),
            out2: WnAffine::init(store, "dec.out.l2", cfg.fc_hidden, 1, rng),
            cls1: SnAffine::init(store, "dec.treat.l1", cfg.r_dim, cfg.fc_hidden, rng),
            cls2: SnAffine::init(store, "dec.treat.l2", cfg.fc_hidden, k, rng),
        }
    }

    pub fn handles(dims: ModelDims, cfg: &ModelConfig) -> Self {
        let (gru_in, k) = Self::shapes(dims, cfg);
        DecoderModel {
            dims,
            r_dim: cfg.r_dim,
            tau: cfg.tau,
            repr_head: Affine { name: "dec.repr.head".into(), d_in: cfg.c_dim, d_out: cfg.r_dim },
            repr_roll: Affine { name: "dec.repr.roll".into(), d_in: cfg.r_dim, d_out: cfg.r_dim },
            gru: GruCell { name: "dec.gru.main".into(), d_in: gru_in, d_h: cfg.r_dim },
            plan: GruCell { name: "dec.plan.gru".into(), d_in: k, d_h: cfg.plan_hidden },
            out1: WnAffine { name: "dec.out.l1".into(), d_in: cfg.r_dim + k, d_out: cfg.fc_hidden },
            out2: WnAffine { name: "dec.out.l2".into(), d_in: cfg.fc_hidden, d_out: 1 },
            cls1: SnAffine { name: "dec.treat.l1".into(), d_in: cfg.r_dim, d_out: cfg.fc_hidden },
            cls2: SnAffine { name: "dec.treat.l2".into(), d_in: cfg.fc_hidden, d_out: k },
        }
    }

    /// Representation head on the encoder context: Phi_t = SELU(Linear(C_t)).
    pub fn represent(&self, g: &mut Graph, b: &ParamBinding, c: ValueId) -> DiffResult<ValueId> {
        let a = self.repr_head.apply(g, b, c)?;
        g.selu(a)
    }

    /// Per-step representation emitted during the rollout, from the decoder
    /// GRU hidden state.
    fn represent_roll(&self, g: &mut Graph, b: &ParamBinding, h: ValueId) -> DiffResult<ValueId> {
        let a = self.repr_roll.apply(g, b, h)?;
        g.selu(a)
    }

    /// Treatment-classifier logits. `freeze_weights` detaches the classifier
    /// parameters (the upper-bound term of the balancing game).
    pub fn classify(
        &self,
        g: &mut Graph,
        b: &ParamBinding,
        phi: ValueId,
        freeze_weights: bool,
    ) -> DiffResult<ValueId> {
        let a = self.cls1.apply_with(g, b, phi, freeze_weights)?;
        let s = g.selu(a)?;
        self.cls2.apply_with(g, b, s, freeze_weights)
    }

    /// Mean-outcome head on [Phi_{t+j-1}, one-hot w_{t+j}].
    fn outcome_head(&self, g: &mut Graph, b: &ParamBinding, phi_prev: ValueId, onehot: ValueId) -> DiffResult<ValueId> {
        let joint = g.concat(&[phi_prev, onehot], 1)?;
        let a = self.out1.apply(g, b, joint)?;
        let s = g.selu(a)?;
        self.out2.apply(g, b, s)
    }

    pub fn refresh_spectral(&self, store: &mut ParamStore, n_iters: usize) {
        self.cls1.refresh(store, n_iters);
        self.cls2.refresh(store, n_iters);
    }
}

/// Graph nodes produced by one batched rollout.
pub struct Rollout {
    /// Predicted outcomes, one [M, 1] node per horizon step.
    pub y_hats: Vec<ValueId>,
    /// Representations emitted at steps t+1 .. t+tau-1.
    pub phis: Vec<ValueId>,
    /// Classifier logits per step from stop-gradient representations
    /// (the treatment network's training signal).
    pub logits: Vec<ValueId>,
}

/// Inputs to one batched rollout; everything is per-row data except the plan,
/// which is per-row-and-step.
pub struct RolloutInputs<'a> {
    pub v_rows: &'a Array,
    pub w_last: &'a [u8],
    pub y_last: &'a Array,
    /// plans[k] is row k's treatment sequence (length tau).
    pub plans: &'a [Vec<u8>],
}

/// Autoregressive decode without teacher forcing: the hidden state starts at
/// Phi_t and every later outcome input is the model's own previous output.
pub fn decode_rollout(
    model: &DecoderModel,
    g: &mut Graph,
    b: &ParamBinding,
    phi0: ValueId,
    inputs: &RolloutInputs<'_>,
) -> DiffResult<Rollout> {
    decode_rollout_opts(model, g, b, phi0, inputs, true)
}

/// Prediction-only rollouts skip the classifier logits.
fn decode_rollout_opts(
    model: &DecoderModel,
    g: &mut Graph,
    b: &ParamBinding,
    phi0: ValueId,
    inputs: &RolloutInputs<'_>,
    want_logits: bool,
) -> DiffResult<Rollout> {
    let m = g.shape(phi0)[0];
    let k = model.dims.k;
    let tau = inputs.plans.first().map(|p| p.len()).unwrap_or(0);
    if tau == 0 {
        return Err(DiffError::Invalid("rollout needs a nonempty plan".into()));
    }
    if inputs.plans.iter().any(|p| p.len() != tau) {
        return Err(DiffError::Invalid("ragged plans in one rollout batch".into()));
    }
    if inputs.plans.iter().flatten().any(|&w| w as usize >= k) {
        return Err(DiffError::Invalid("treatment code out of range".into()));
    }

    let v = g.constant(inputs.v_rows.clone());
    // Plan sub-encoder starts from the last factual treatment.
    let mut plan_h = g.constant(Array::zeros(&[m, model.plan.d_h]));
    let w_last_oh = g.constant(one_hot_rows(inputs.w_last, k));
    plan_h = model.plan.step(g, b, w_last_oh, plan_h)?;

    let mut h = phi0;
    let mut phi_prev = phi0;
    let mut y_prev = g.constant(inputs.y_last.clone());
    let mut y_hats = Vec::with_capacity(tau);
    let mut phis = Vec::with_capacity(tau.saturating_sub(1));
    let mut logits = Vec::with_capacity(tau);

    for j in 0..tau {
        let codes: Vec<u8> = inputs.plans.iter().map(|p| p[j]).collect();
        let onehot = g.constant(one_hot_rows(&codes, k));
        plan_h = model.plan.step(g, b, onehot, plan_h)?;

        // Outcome and treatment logits both read the previous representation.
        let y_hat = model.outcome_head(g, b, phi_prev, onehot)?;
        if want_logits {
            let phi_sg = g.stop_gradient(phi_prev);
            logits.push(model.classify(g, b, phi_sg, false)?);
        }

        let gru_in = g.concat(&[onehot, plan_h, y_prev, v], 1)?;
        h = model.gru.step(g, b, gru_in, h)?;
        if j + 1 < tau {
            let phi = model.represent_roll(g, b, h)?;
            phis.push(phi);
            phi_prev = phi;
        }
        y_prev = y_hat;
        y_hats.push(y_hat);
    }
    Ok(Rollout { y_hats, phis, logits })
}

/// Gaussian negative log-likelihood of the predicted sequence, summed over
/// horizons with the batch mean taken per horizon.
pub fn outcome_nll(
    g: &mut Graph,
    y_hats: &[ValueId],
    targets: &[Array],
    sigma: f64,
) -> DiffResult<ValueId> {
    if sigma <= 0.0 {
        return Err(DiffError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if y_hats.len() != targets.len() {
        return Err(DiffError::Invalid("prediction/target length mismatch".into()));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let constant = (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let mut acc: Option<ValueId> = None;
    for (&y_hat, target) in y_hats.iter().zip(targets) {
        let t = g.constant(target.clone());
        let diff = g.sub(y_hat, t)?;
        let sq = g.square(diff)?;
        let mse = g.mean(sq)?;
        let term = g.scale(mse, inv)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let sums = acc.expect("at least one horizon");
    g.shift(sums, constant * y_hats.len() as f64)
}

/// Contrastive log-ratio upper-bound value from per-row conditional and
/// marginal log-likelihood nodes: mean(cond) - mean(marginal).
pub fn club_from_logq(g: &mut Graph, logq_cond: ValueId, logq_marg: ValueId) -> DiffResult<ValueId> {
    let c = g.mean(logq_cond)?;
    let m = g.mean(logq_marg)?;
    let neg = g.scale(m, -1.0)?;
    g.add(c, neg)
}

/// Plain-value CLUB estimate from precomputed log-likelihoods; used by the
/// probe tooling and tests, mirror of the graph route.
pub fn club_value(logq_cond: &[f64], logq_marg: &[f64]) -> f64 {
    let n = logq_cond.len() as f64;
    logq_cond.iter().sum::<f64>() / n - logq_marg.iter().sum::<f64>() / n
}

/// Uniform-target cross-entropy on live representations (domain-confusion
/// stand-in used by the ablation flag): mean over rows of
/// LSE(logits) - (1/K) sum_k logits_k.
fn confusion_to_uniform(g: &mut Graph, logits: ValueId) -> DiffResult<ValueId> {
    let k = g.shape(logits)[1];
    let m = g.shape(logits)[0];
    let lse = g.log_sum_exp(logits)?;
    let mut acc: Option<ValueId> = None;
    for class in 0..k {
        let picked = g.one_hot_gather(logits, &vec![class; m])?;
        acc = Some(match acc {
            Some(a) => g.add(a, picked)?,
            None => picked,
        });
    }
    let sum_logits = acc.expect("k >= 1");
    let mean_logits = g.scale(sum_logits, 1.0 / k as f64)?;
    let per_row = g.sub(lse, mean_logits)?;
    g.mean(per_row)
}

/// Uniform random permutation with the identity rejected (n >= 2).
pub fn club_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 2);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss_y: f64,
    pub balance_term: f64,
    pub loss_w: f64,
    pub val_mse: f64,
}

pub struct TrainedDecoder {
    pub store: ParamStore,
    pub log: Vec<TrainLogRow>,
    /// Set when training stopped on a non-finite loss and returned the
    /// last good parameters.
    pub aborted: bool,
}

struct BatchPlan {
    rows: Vec<(usize, usize)>, // (unit index, origin)
}

fn draw_origins(
    prep: &PreparedCohort,
    units: &[usize],
    tau: usize,
    frac: f64,
    rng: &mut impl Rng,
) -> BatchPlan {
    let mut rows = Vec::new();
    for &u in units {
        let active = prep.units[u].active_len;
        if active < tau + 1 {
            continue;
        }
        let usable = active - tau; // origins 0 ..= active-1-tau
        let m = ((frac * usable as f64).ceil() as usize).clamp(1, usable);
        let mut origins: Vec<usize> = (0..usable).collect();
        origins.shuffle(rng);
        origins.truncate(m);
        origins.sort_unstable();
        rows.extend(origins.into_iter().map(|t| (u, t)));
    }
    BatchPlan { rows }
}

/// Encodes full sequences for a unit batch and gathers context rows at the
/// requested (unit, origin) pairs via a constant selector matrix. The
/// selected context is the hidden state after consuming the step that
/// carries (W_origin, Y_origin), i.e. everything known before the first
/// planned treatment.
fn encode_and_select(
    g: &mut Graph,
    b: &ParamBinding,
    enc: &EncoderModel,
    prep: &PreparedCohort,
    units: &[usize],
    rows: &[(usize, usize)],
) -> DiffResult<ValueId> {
    let batch = units.len();
    let len = prep.longest_active(units);
    let mut z_steps = Vec::with_capacity(len);
    let mut masks = Vec::with_capacity(len);
    for t in 0..len {
        let u = g.constant(prep.u_array(units, t));
        z_steps.push(enc.encode_local(g, b, u)?);
        masks.push(prep.mask_array(units, t));
    }
    let c_steps = enc.encode_context(g, b, &z_steps, Some(&masks))?;
    let stacked = g.concat(&c_steps, 0)?; // [(len * batch), c_dim]
    let mut selector = Array::zeros(&[rows.len(), len * batch]);
    for (r, &(unit, origin)) in rows.iter().enumerate() {
        let col = units.iter().position(|&u| u == unit).expect("unit in batch");
        selector.set2(r, (origin + 1) * batch + col, 1.0);
    }
    let s = g.constant(selector);
    g.matmul(s, stacked)
}

struct BatchLosses {
    total: ValueId,
    #[cfg_attr(not(test), allow(dead_code))]
    loss_y_node: ValueId,
    #[cfg_attr(not(test), allow(dead_code))]
    balance_node: Option<ValueId>,
    #[cfg_attr(not(test), allow(dead_code))]
    loss_w_node: ValueId,
    loss_y: f64,
    balance: f64,
    loss_w: f64,
}

#[allow(clippy::too_many_arguments)]
fn decoder_batch_losses(
    g: &mut Graph,
    b: &ParamBinding,
    enc: &EncoderModel,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    units: &[usize],
    plan_rows: &BatchPlan,
    mcfg: &ModelConfig,
    club_rng: &mut impl Rng,
) -> DiffResult<BatchLosses> {
    let rows = &plan_rows.rows;
    let m = rows.len();
    let tau = mcfg.tau;
    let c_sel = encode_and_select(g, b, enc, prep, units, rows)?;
    let phi0 = dec.represent(g, b, c_sel)?;

    let d_v = prep.dims.d_v;
    let mut v_rows = Array::zeros(&[m, d_v]);
    let mut y_last = Array::zeros(&[m, 1]);
    let mut w_last = Vec::with_capacity(m);
    let mut plans = Vec::with_capacity(m);
    let mut step_codes: Vec<Vec<usize>> = vec![Vec::with_capacity(m); tau];
    let mut targets: Vec<Array> = Vec::with_capacity(tau);
    let mut target_data: Vec<Vec<f64>> = vec![Vec::with_capacity(m); tau];
    for (r, &(u, t)) in rows.iter().enumerate() {
        let unit = &prep.units[u];
        for (i, &vv) in unit.v.iter().enumerate() {
            v_rows.set2(r, i, vv);
        }
        y_last.set2(r, 0, unit.y[t]);
        w_last.push(unit.w[t]);
        let plan: Vec<u8> = unit.w[t + 1..=t + tau].to_vec();
        for j in 0..tau {
            step_codes[j].push(plan[j] as usize);
            target_data[j].push(unit.y[t + 1 + j]);
        }
        plans.push(plan);
    }
    for j in 0..tau {
        targets.push(Array::new(vec![m, 1], target_data[j].clone()));
    }

    let inputs = RolloutInputs { v_rows: &v_rows, w_last: &w_last, y_last: &y_last, plans: &plans };
    let rollout = decode_rollout(dec, g, b, phi0, &inputs)?;

    let loss_y = outcome_nll(g, &rollout.y_hats, &targets, mcfg.sigma_outcome)?;

    // Representations feeding the balancing terms: Phi at the origin and at
    // every rollout step but the last.
    let mut phi_seq = vec![phi0];
    phi_seq.extend(rollout.phis.iter().copied());

    let balance: Option<ValueId> = match mcfg.balancing {
        Balancing::Off => None,
        Balancing::Club => {
            let perm = club_permutation(m, club_rng);
            let mut acc: Option<ValueId> = None;
            for (j, &phi) in phi_seq.iter().enumerate() {
                let logits = dec.classify(g, b, phi, true)?;
                let (cond, _) = floored_log_softmax_gather(g, logits, &step_codes[j])?;
                let permuted: Vec<usize> = perm.iter().map(|&p| step_codes[j][p]).collect();
                let (marg, _) = floored_log_softmax_gather(g, logits, &permuted)?;
                let term = club_from_logq(g, cond, marg)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            Some(g.scale(acc.expect("tau >= 1"), 1.0 / phi_seq.len() as f64)?)
        }
        Balancing::Cdc => {
            let mut acc: Option<ValueId> = None;
            for &phi in &phi_seq {
                let logits = dec.classify(g, b, phi, true)?;
                let term = confusion_to_uniform(g, logits)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            Some(g.scale(acc.expect("tau >= 1"), 1.0 / phi_seq.len() as f64)?)
        }
    };

    // Treatment network: cross-entropy through detached representations.
    let mut lw_acc: Option<ValueId> = None;
    for (j, &logits) in rollout.logits.iter().enumerate() {
        let term = cross_entropy_mean(g, logits, &step_codes[j])?;
        lw_acc = Some(match lw_acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let loss_w = g.scale(lw_acc.expect("tau >= 1"), 1.0 / rollout.logits.len() as f64)?;

    let mut total = loss_y;
    if let Some(bal) = balance {
        total = g.add(total, bal)?;
    }
    total = g.add(total, loss_w)?;
    Ok(BatchLosses {
        total,
        loss_y_node: loss_y,
        balance_node: balance,
        loss_w_node: loss_w,
        loss_y: g.value(loss_y).item(),
        balance: balance.map(|v| g.value(v).item()).unwrap_or(0.0),
        loss_w: g.value(loss_w).item(),
    })
}

/// Stage-two training. Alternates the adaptive step on the representation
/// and outcome parameters (with a reduced fine-tuning rate on the encoder)
/// with the momentum step on the treatment network, early-stopping on
/// validation factual MSE.
pub fn train_decoder(
    train: &PreparedCohort,
    val: &PreparedCohort,
    pretrained: &ParamStore,
    mcfg: &ModelConfig,
    seed: u64,
) -> DiffResult<TrainedDecoder> {
    let dims = train.dims;
    let enc = EncoderModel::handles(dims, mcfg);
    let mut store = pretrained.clone();
    let mut init_rng = substream(seed, "dec.init");
    let dec = DecoderModel::init(&mut store, dims, mcfg, &mut init_rng);

    let enc_names = store.trainable_names_with_prefix(&ENC_FINETUNE_PREFIXES);
    let dec_names = store.trainable_names_with_prefix(&DEC_MAIN_PREFIXES);
    let treat_names = store.trainable_names_with_prefix(&[DEC_TREAT_PREFIX]);

    let mut enc_opt = AdamWState::new();
    let mut dec_opt = AdamWState::new();
    let mut treat_opt = SgdMomentumState::new();
    let enc_cfg = AdamWConfig {
        lr: mcfg.dec_lr * mcfg.enc_finetune_scale,
        weight_decay: mcfg.weight_decay,
        ..Default::default()
    };
    let dec_cfg = AdamWConfig {
        lr: mcfg.dec_lr,
        weight_decay: mcfg.weight_decay,
        ..Default::default()
    };

    let mut batch_rng = substream(seed, "dec.batch");
    let mut club_rng = substream(seed, "dec.club");
    let mut monitor = EarlyStop::new(mcfg.dec_min_delta, mcfg.dec_patience);
    let mut best = store.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.units.len()).collect();
    let mut aborted = false;

    'training: for epoch in 0..mcfg.dec_max_epochs {
        order.shuffle(&mut batch_rng);
        let mut sums = [0.0f64; 3];
        let mut n_batches = 0usize;
        for chunk in order.chunks(mcfg.dec_batch) {
            let plan = draw_origins(train, chunk, mcfg.tau, mcfg.origin_frac, &mut batch_rng);
            if plan.rows.len() < 2 {
                continue;
            }
            dec.refresh_spectral(&mut store, 1);
            let mut g = Graph::new();
            let binding = store.bind_all(&mut g);
            let losses = decoder_batch_losses(
                &mut g, &binding, &enc, &dec, train, chunk, &plan, mcfg, &mut club_rng,
            )?;
            if !g.value(losses.total).item().is_finite() {
                aborted = true;
                break 'training;
            }
            let grads = g.backward(losses.total)?;
            let mut enc_grads = binding.extract_grads(&g, &grads, &enc_names);
            let mut dec_grads = binding.extract_grads(&g, &grads, &dec_names);
            let mut treat_grads = binding.extract_grads(&g, &grads, &treat_names);
            clip_grads(&mut enc_grads, mcfg.grad_clip);
            clip_grads(&mut dec_grads, mcfg.grad_clip);
            clip_grads(&mut treat_grads, mcfg.grad_clip);
            adamw_step(&mut store, &enc_grads, &mut enc_opt, &enc_cfg)?;
            adamw_step(&mut store, &dec_grads, &mut dec_opt, &dec_cfg)?;
            sgd_momentum_step(&mut store, &treat_grads, &mut treat_opt, mcfg.treat_lr, mcfg.treat_momentum)?;
            sums[0] += losses.loss_y;
            sums[1] += losses.balance;
            sums[2] += losses.loss_w;
            n_batches += 1;
        }

        let val_mse = validation_factual_mse(&store, &enc, &dec, val, mcfg)?;
        log.push(TrainLogRow {
            epoch,
            loss_y: sums[0] / n_batches.max(1) as f64,
            balance_term: sums[1] / n_batches.max(1) as f64,
            loss_w: sums[2] / n_batches.max(1) as f64,
            val_mse,
        });
        let signal = monitor.update(val_mse);
        if monitor.last_was_best() {
            best = store.clone();
        }
        if signal == StopSignal::Stop {
            break;
        }
    }
    Ok(TrainedDecoder { store: best, log, aborted })
}

/// Deterministic factual-rollout MSE over a cohort: a fixed stride of
/// origins per unit, own-output feed-in, no randomness. Errors are measured
/// in percent of the outcome ceiling (matching the reporting convention), so
/// the early-stopping min-delta operates on a comparable scale.
pub fn validation_factual_mse(
    store: &ParamStore,
    enc: &EncoderModel,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    mcfg: &ModelConfig,
) -> DiffResult<f64> {
    let tau = mcfg.tau;
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (u, unit) in prep.units.iter().enumerate() {
        if unit.active_len < tau + 1 {
            continue;
        }
        let usable = unit.active_len - tau;
        let stride = (usable / 8).max(1);
        let mut t = 0;
        while t < usable {
            rows.push((u, t));
            t += stride;
        }
    }
    if rows.is_empty() {
        return Err(DiffError::Invalid("validation cohort has no usable origins".into()));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for chunk in rows.chunks(512) {
        let preds = predict_rows(store, enc, dec, prep, chunk, None)?;
        for (&(u, t), pred) in chunk.iter().zip(&preds) {
            let unit = &prep.units[u];
            for j in 0..tau {
                let err = 100.0 * (pred[j] - unit.y[t + 1 + j]);
                se += err * err;
                n += 1;
            }
        }
    }
    Ok(se / n as f64)
}

/// Representation rows at the given (unit, origin) pairs: each row's prefix
/// is masked to its own origin (inclusive of the origin outcome), so the
/// final hidden state is the prediction-time context for that row.
pub fn phi_rows_at(
    store: &ParamStore,
    enc: &EncoderModel,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    pairs: &[(usize, usize)],
) -> DiffResult<Vec<Vec<f64>>> {
    let m = pairs.len();
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    // The prefix runs one step past the origin: that step's components carry
    // (W_origin, Y_origin) and nothing later.
    let len = pairs.iter().map(|&(_, t)| t + 2).max().unwrap_or(1);
    let d_u = prep.dims.d_u();
    let mut z_steps = Vec::with_capacity(len);
    let mut masks = Vec::with_capacity(len);
    for t in 0..len {
        let mut data = vec![0.0; m * d_u];
        let mut mask = vec![0.0; m];
        for (r, &(u, origin)) in pairs.iter().enumerate() {
            if t <= origin + 1 {
                data[r * d_u..(r + 1) * d_u].copy_from_slice(&prep.units[u].u_rows[t]);
                mask[r] = 1.0;
            }
        }
        let u = g.constant(Array::new(vec![m, d_u], data));
        z_steps.push(enc.encode_local(&mut g, &b, u)?);
        masks.push(Array::new(vec![m, 1], mask));
    }
    let c_steps = enc.encode_context(&mut g, &b, &z_steps, Some(&masks))?;
    let c_final = *c_steps.last().unwrap();
    let phi0 = dec.represent(&mut g, &b, c_final)?;
    let phi = g.value(phi0);
    Ok((0..m).map(|r| phi.row(r).to_vec()).collect())
}

/// Rollout from precomputed representation rows; predictions in model scale.
pub fn rollout_values(
    store: &ParamStore,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    rows: &[(usize, usize)],
    plans: &[Vec<u8>],
    phi_rows: &[Vec<f64>],
) -> DiffResult<Vec<Vec<f64>>> {
    let m = rows.len();
    let tau = plans.first().map(|p| p.len()).unwrap_or(0);
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let mut phi_data = Vec::with_capacity(m * dec.r_dim);
    for row in phi_rows {
        phi_data.extend_from_slice(row);
    }
    let phi0 = g.constant(Array::new(vec![m, dec.r_dim], phi_data));

    let d_v = prep.dims.d_v;
    let mut v_rows = Array::zeros(&[m, d_v]);
    let mut y_last = Array::zeros(&[m, 1]);
    let mut w_last = Vec::with_capacity(m);
    for (r, &(u, t)) in rows.iter().enumerate() {
        let unit = &prep.units[u];
        for (i, &vv) in unit.v.iter().enumerate() {
            v_rows.set2(r, i, vv);
        }
        y_last.set2(r, 0, unit.y[t]);
        w_last.push(unit.w[t]);
    }
    let inputs = RolloutInputs { v_rows: &v_rows, w_last: &w_last, y_last: &y_last, plans };
    let rollout = decode_rollout_opts(dec, &mut g, &b, phi0, &inputs, false)?;
    let mut out = vec![Vec::with_capacity(tau); m];
    for y_hat in &rollout.y_hats {
        for (r, o) in out.iter_mut().enumerate() {
            o.push(g.value(*y_hat).data()[r]);
        }
    }
    Ok(out)
}

/// Batched prediction at (unit, origin) rows. `plans` overrides the factual
/// treatments when given (one plan per row); predictions are in model scale.
pub fn predict_rows(
    store: &ParamStore,
    enc: &EncoderModel,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    rows: &[(usize, usize)],
    plans: Option<&[Vec<u8>]>,
) -> DiffResult<Vec<Vec<f64>>> {
    let tau = plans
        .map(|p| p.first().map(|x| x.len()).unwrap_or(0))
        .unwrap_or(dec.tau);
    let plan_rows: Vec<Vec<u8>> = rows
        .iter()
        .enumerate()
        .map(|(r, &(u, t))| match plans {
            Some(p) => p[r].clone(),
            None => prep.units[u].w[t + 1..=t + tau].to_vec(),
        })
        .collect();
    let phi = phi_rows_at(store, enc, dec, prep, rows)?;
    rollout_values(store, dec, prep, rows, &plan_rows, &phi)
}

/// Counterfactual prediction for a single history prefix and plan; a pure
/// function of (parameters, prefix, plan). Returns model-scale outcomes.
pub fn predict_counterfactual(
    store: &ParamStore,
    enc: &EncoderModel,
    dec: &DecoderModel,
    prep: &PreparedCohort,
    unit: usize,
    origin: usize,
    plan: &[u8],
) -> DiffResult<Vec<f64>> {
    if plan.is_empty() {
        return Err(DiffError::Invalid("empty treatment plan".into()));
    }
    let preds = predict_rows(store, enc, dec, prep, &[(unit, origin)], Some(&[plan.to_vec()]))?;
    Ok(preds.into_iter().next().unwrap())
}
