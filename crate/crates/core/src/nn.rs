//! Layer building blocks over the differentiation graph: plain, weight-normed
//! and spectral-normed affine maps, and the GRU cell. Each layer owns its
//! parameter names inside a [`ParamStore`]; applying a layer wires graph ops
//! against a [`ParamBinding`].

use crate::diffcore::{
    initial_u, power_iterate, Array, DiffResult, Graph, ParamBinding, ParamStore, ValueId,
};
use rand::Rng;

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random::<f64>() * 2.0 * bound - bound).collect(),
    )
}

/// y = x W + b with W stored [d_in, d_out].
#[derive(Clone, Debug)]
pub struct Affine {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        store.insert(format!("{name}.w"), uniform_init(&[d_in, d_out], d_in, rng));
        store.insert(format!("{name}.b"), Array::zeros(&[d_out]));
        Affine { name: name.to_string(), d_in, d_out }
    }

    pub fn apply(&self, g: &mut Graph, b: &ParamBinding, x: ValueId) -> DiffResult<ValueId> {
        let w = b.id(&format!("{}.w", self.name));
        let bias = b.id(&format!("{}.b", self.name));
        g.affine(x, w, bias)
    }
}

/// Weight-normalized affine: direction v stored [d_out, d_in] (row per output
/// unit), gain g per row, effective weight applied as x @ (g v/|v|)^T + b.
#[derive(Clone, Debug)]
pub struct WnAffine {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl WnAffine {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let v = uniform_init(&[d_out, d_in], d_in, rng);
        // Gain starts at the row norm so the initial effective weight is v.
        let gains: Vec<f64> = (0..d_out)
            .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        store.insert(format!("{name}.v"), v);
        store.insert(format!("{name}.g"), Array::from_vec(gains));
        store.insert(format!("{name}.b"), Array::zeros(&[d_out]));
        WnAffine { name: name.to_string(), d_in, d_out }
    }

    pub fn apply(&self, g: &mut Graph, b: &ParamBinding, x: ValueId) -> DiffResult<ValueId> {
        let v = b.id(&format!("{}.v", self.name));
        let gain = b.id(&format!("{}.g", self.name));
        let bias = b.id(&format!("{}.b", self.name));
        let w_eff = g.weight_norm(v, gain)?;
        let mm = g.matmul_nt(x, w_eff)?;
        let shape = g.shape(mm).to_vec();
        let bb = g.broadcast(bias, &shape)?;
        g.add(mm, bb)
    }
}

/// Spectral-normalized affine: W stored [d_in, d_out], persistent direction
/// vector `u` (length d_in) as auxiliary state. `refresh` advances the power
/// iteration; `apply` freezes (u, v, sigma) into the graph.
#[derive(Clone, Debug)]
pub struct SnAffine {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl SnAffine {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        store.insert(format!("{name}.w"), uniform_init(&[d_in, d_out], d_in, rng));
        store.insert(format!("{name}.b"), Array::zeros(&[d_out]));
        store.insert_aux(format!("{name}.u"), Array::from_vec(initial_u(d_in, rng)));
        SnAffine { name: name.to_string(), d_in, d_out }
    }

    /// One (or more) power iterations against the current weight; call once
    /// per training step.
    pub fn refresh(&self, store: &mut ParamStore, n_iters: usize) {
        let w = store.get(&format!("{}.w", self.name)).clone();
        let mut u = store.get(&format!("{}.u", self.name)).data().to_vec();
        power_iterate(&w, &mut u, n_iters);
        *store.get_mut(&format!("{}.u", self.name)) = Array::from_vec(u);
    }

    pub fn apply(&self, g: &mut Graph, b: &ParamBinding, x: ValueId) -> DiffResult<ValueId> {
        self.apply_with(g, b, x, false)
    }

    /// `freeze` detaches the layer's own weights so gradients flow only into
    /// the activations (the representation side of the adversarial game).
    pub fn apply_with(&self, g: &mut Graph, b: &ParamBinding, x: ValueId, freeze: bool) -> DiffResult<ValueId> {
        let mut w_id = b.id(&format!("{}.w", self.name));
        let mut bias = b.id(&format!("{}.b", self.name));
        if freeze {
            w_id = g.stop_gradient(w_id);
            bias = g.stop_gradient(bias);
        }
        let mut u = g.value(b.id(&format!("{}.u", self.name))).data().to_vec();
        // No state update here: with `u` frozen, sigma = |W^T u| is an exact
        // function of the bound weight and the analytic backward matches it.
        let est = power_iterate(g.value(w_id), &mut u, 0);
        let w_norm = g.spectral_apply(w_id, &est.u, &est.v, est.sigma)?;
        let mm = g.matmul(x, w_norm)?;
        let shape = g.shape(mm).to_vec();
        let bb = g.broadcast(bias, &shape)?;
        g.add(mm, bb)
    }
}

/// Single GRU cell. Convention:
/// r = sig(xW_r + hU_r + b_r), z = sig(xW_z + hU_z + b_z),
/// c = tanh(xW_h + (r*h)U_h + b_h), h' = (1-z)*h + z*c.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub name: String,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruCell {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        for gate in ["r", "z", "h"] {
            store.insert(format!("{name}.w_{gate}"), uniform_init(&[d_in, d_h], d_in, rng));
            store.insert(format!("{name}.u_{gate}"), uniform_init(&[d_h, d_h], d_h, rng));
            store.insert(format!("{name}.b_{gate}"), Array::zeros(&[d_h]));
        }
        GruCell { name: name.to_string(), d_in, d_h }
    }

    pub fn step(&self, g: &mut Graph, b: &ParamBinding, x: ValueId, h_prev: ValueId) -> DiffResult<ValueId> {
        let gate = |g: &mut Graph, tag: &str, extra_h: ValueId| -> DiffResult<ValueId> {
            let w = b.id(&format!("{}.w_{tag}", self.name));
            let u = b.id(&format!("{}.u_{tag}", self.name));
            let bias = b.id(&format!("{}.b_{tag}", self.name));
            let xw = g.matmul(x, w)?;
            let hu = g.matmul(extra_h, u)?;
            let s = g.add(xw, hu)?;
            let shape = g.shape(s).to_vec();
            let bb = g.broadcast(bias, &shape)?;
            g.add(s, bb)
        };
        let r_pre = gate(g, "r", h_prev)?;
        let r = g.sigmoid(r_pre)?;
        let z_pre = gate(g, "z", h_prev)?;
        let z = g.sigmoid(z_pre)?;
        let rh = g.mul(r, h_prev)?;
        let c_pre = gate(g, "h", rh)?;
        let c = g.tanh(c_pre)?;
        let keep = g.one_minus(z)?;
        let kept = g.mul(keep, h_prev)?;
        let new = g.mul(z, c)?;
        g.add(kept, new)
    }

    /// Step with a per-row mask [B, 1]: masked rows pass the hidden state
    /// through unchanged, so padded steps carry no information.
    pub fn masked_step(
        &self,
        g: &mut Graph,
        b: &ParamBinding,
        x: ValueId,
        h_prev: ValueId,
        mask: &Array,
    ) -> DiffResult<ValueId> {
        let h_new = self.step(g, b, x, h_prev)?;
        let shape = g.shape(h_new).to_vec();
        let m = g.constant(mask.clone());
        let mb = g.broadcast(m, &shape)?;
        let keep = g.one_minus(mb)?;
        let a = g.mul(mb, h_new)?;
        let bkeep = g.mul(keep, h_prev)?;
        g.add(a, bkeep)
    }
}

/// Mean cross-entropy of logits against integer targets, via log-softmax.
pub fn cross_entropy_mean(g: &mut Graph, logits: ValueId, targets: &[usize]) -> DiffResult<ValueId> {
    let lse = g.log_sum_exp(logits)?;
    let picked = g.one_hot_gather(logits, targets)?;
    let per_row = g.sub(lse, picked)?;
    g.mean(per_row)
}

/// log q(target | row) per row, floored at ln(1e-12). Returns the node and
/// how many rows hit the floor.
pub fn floored_log_softmax_gather(
    g: &mut Graph,
    logits: ValueId,
    targets: &[usize],
) -> DiffResult<(ValueId, usize)> {
    let lse = g.log_sum_exp(logits)?;
    let picked = g.one_hot_gather(logits, targets)?;
    let logq = g.sub(picked, lse)?;
    let floor = (1e-12f64).ln();
    let vals = g.value(logq).data().to_vec();
    let flagged = vals.iter().filter(|&&v| v < floor).count();
    if flagged == 0 {
        return Ok((logq, 0));
    }
    // Clamp from below: zero the gradient on floored entries.
    let mask = Array::from_vec(vals.iter().map(|&v| if v < floor { 0.0 } else { 1.0 }).collect());
    let fill = Array::from_vec(vals.iter().map(|&v| if v < floor { floor } else { 0.0 }).collect());
    let m = g.constant(mask);
    let f = g.constant(fill);
    let kept = g.mul(logq, m)?;
    let out = g.add(kept, f)?;
    Ok((out, flagged))
}

/// One-hot rows for treatment codes.
pub fn one_hot_rows(codes: &[u8], k: usize) -> Array {
    let mut data = vec![0.0; codes.len() * k];
    for (i, &c) in codes.iter().enumerate() {
        data[i * k + c as usize] = 1.0;
    }
    Array::new(vec![codes.len(), k], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check_params;
    use crate::simkit::rng::substream;

    #[test]
    fn gru_zero_params_halves_hidden() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "t");
        let cell = GruCell::init(&mut store, "gru", 3, 4, &mut rng);
        for gate in ["r", "z", "h"] {
            *store.get_mut(&format!("gru.w_{gate}")) = Array::zeros(&[3, 4]);
            *store.get_mut(&format!("gru.u_{gate}")) = Array::zeros(&[4, 4]);
        }
        let mut g = Graph::new();
        let b = store.bind_all(&mut g);
        let x = g.constant(Array::new(vec![1, 3], vec![0.5, -1.0, 2.0]));
        let h = g.constant(Array::new(vec![1, 4], vec![1.0, -2.0, 0.5, 4.0]));
        let out = cell.step(&mut g, &b, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 0.25, 2.0]);

        let h0 = g.constant(Array::zeros(&[1, 4]));
        let out0 = cell.step(&mut g, &b, x, h0).unwrap();
        assert!(g.value(out0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_step_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "t");
        let cell = GruCell::init(&mut store, "gru", 3, 4, &mut rng);
        let names: Vec<String> = store.names().cloned().collect();
        let x = Array::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]);
        let h = Array::new(vec![2, 4], vec![0.3, -0.2, 0.5, 0.4, -0.6, 0.1, 0.0, 0.9]);
        let err = grad_check_params(
            &store,
            &names,
            |g, b| {
                let xv = g.constant(x.clone());
                let hv = g.constant(h.clone());
                let out = cell.step(g, b, xv, hv)?;
                let sq = g.square(out)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gru gradient error {err}");
    }

    #[test]
    fn masked_step_passes_hidden_through() {
        let mut store = ParamStore::new();
        let mut rng = substream(2, "t");
        let cell = GruCell::init(&mut store, "gru", 2, 3, &mut rng);
        let mut g = Graph::new();
        let b = store.bind_all(&mut g);
        let x = g.constant(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let h = g.constant(Array::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let mask = Array::new(vec![2, 1], vec![1.0, 0.0]);
        let out = cell.masked_step(&mut g, &b, x, h, &mask).unwrap();
        // Row 1 masked: unchanged.
        assert_eq!(&g.value(out).data()[3..], &[0.4, 0.5, 0.6]);
        assert_ne!(&g.value(out).data()[..3], &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn wn_affine_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = substream(3, "t");
        let layer = WnAffine::init(&mut store, "wn", 3, 2, &mut rng);
        let names: Vec<String> = store.names().cloned().collect();
        let x = Array::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.3, 0.8, -0.2]);
        let err = grad_check_params(
            &store,
            &names,
            |g, b| {
                let xv = g.constant(x.clone());
                let out = layer.apply(g, b, xv)?;
                let act = g.selu(out)?;
                let sq = g.square(act)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "wn affine gradient error {err}");
    }

    #[test]
    fn sn_affine_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = substream(4, "t");
        let layer = SnAffine::init(&mut store, "sn", 3, 2, &mut rng);
        layer.refresh(&mut store, 5);
        let names = vec!["sn.w".to_string(), "sn.b".to_string()];
        let x = Array::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.3, 0.8, -0.2]);
        let err = grad_check_params(
            &store,
            &names,
            |g, b| {
                let xv = g.constant(x.clone());
                let out = layer.apply(g, b, xv)?;
                let sq = g.square(out)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "sn affine gradient error {err}");
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_k() {
        let mut g = Graph::new();
        let logits = g.constant(Array::zeros(&[5, 4]));
        let ce = cross_entropy_mean(&mut g, logits, &[0, 1, 2, 3, 0]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_cross_entropy_vanishes() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 3 * 4];
        for (i, &t) in [1usize, 3, 0].iter().enumerate() {
            for k in 0..4 {
                data[i * 4 + k] = if k == t { 20.0 } else { 0.0 };
            }
        }
        let logits = g.constant(Array::new(vec![3, 4], data));
        let ce = cross_entropy_mean(&mut g, logits, &[1, 3, 0]).unwrap();
        assert!(g.value(ce).item() < 1e-8);
    }
}
