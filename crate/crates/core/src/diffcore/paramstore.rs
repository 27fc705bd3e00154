//! Named parameter groups shared by the encoder and decoder.
//!
//! Group membership is encoded in the name prefix (e.g. `enc.local.`,
//! `dec.treat.`), which is what the optimizers and the adversarial update
//! split key on. BTreeMap keeps iteration deterministic.

use super::array::Array;
use super::graph::{Graph, ValueId};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Param {
    pub array: Array,
    /// Trainable parameters receive gradients; auxiliary state (e.g. the
    /// spectral-norm direction vector) is persisted but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Gradients keyed by parameter name, as extracted after a backward pass.
pub type GradMap = BTreeMap<String, Array>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.params.insert(name.into(), Param { array, trainable: true });
    }

    pub fn insert_aux(&mut self, name: impl Into<String>, array: Array) {
        self.params.insert(name.into(), Param { array, trainable: false });
    }

    pub fn get(&self, name: &str) -> &Array {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).array
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array {
        &mut self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).array
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names_with_prefix<'a>(&'a self, prefixes: &'a [&'a str]) -> Vec<String> {
        self.params
            .iter()
            .filter(|(name, p)| p.trainable && prefixes.iter().any(|pre| name.starts_with(pre)))
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.array.len()).sum()
    }

    /// Binds every parameter into `graph`. A parameter becomes a
    /// `requires_grad` leaf iff it is trainable and `live` accepts its name;
    /// everything else enters as a constant.
    pub fn bind(&self, graph: &mut Graph, live: impl Fn(&str) -> bool) -> ParamBinding {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            let rg = p.trainable && live(name);
            ids.insert(name.clone(), graph.leaf(p.array.clone(), rg));
        }
        ParamBinding { ids }
    }

    pub fn bind_all(&self, graph: &mut Graph) -> ParamBinding {
        self.bind(graph, |_| true)
    }

    /// Order-insensitive content hash of the trainable parameters; used by
    /// tests asserting that an optimizer never touched a parameter group.
    pub fn content_hash(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, p) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for &x in p.array.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Name-to-node mapping produced by [`ParamStore::bind`].
pub struct ParamBinding {
    ids: BTreeMap<String, ValueId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> ValueId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }

    /// Pull gradients for the named parameters out of a backward result.
    pub fn extract_grads(
        &self,
        graph: &Graph,
        grads: &super::graph::Gradients,
        names: &[String],
    ) -> GradMap {
        let mut out = GradMap::new();
        for name in names {
            let id = self.id(name);
            let shape = graph.shape(id).to_vec();
            out.insert(name.clone(), grads.get_or_zeros(id, &shape));
        }
        out
    }
}
