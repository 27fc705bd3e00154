//! Portable text container for named parameter tables. The decoder
//! checkpoint extends the encoder container with more groups; both record
//! the dimensions and the config fingerprint so stages can refuse
//! mismatched artifacts.

use crate::diffcore::{Array, ParamStore};
use crate::model::{ModelConfig, ModelDims};
use crate::simkit::write_atomic;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("bad checkpoint file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// "encoder" after stage one, "model" after stage two.
    pub kind: String,
    pub fingerprint: String,
    pub seed: u64,
    pub dims: ModelDims,
    pub z_dim: usize,
    pub c_dim: usize,
    pub r_dim: usize,
    pub fc_hidden: usize,
    pub plan_hidden: usize,
    pub tau: usize,
    pub sigma: f64,
}

impl CheckpointMeta {
    pub fn new(kind: &str, fingerprint: &str, seed: u64, dims: ModelDims, mcfg: &ModelConfig) -> Self {
        CheckpointMeta {
            kind: kind.to_string(),
            fingerprint: fingerprint.to_string(),
            seed,
            dims,
            z_dim: mcfg.z_dim,
            c_dim: mcfg.c_dim,
            r_dim: mcfg.r_dim,
            fc_hidden: mcfg.fc_hidden,
            plan_hidden: mcfg.plan_hidden,
            tau: mcfg.tau,
            sigma: mcfg.sigma_outcome,
        }
    }

    /// Overlays the recorded dimensions onto a model config.
    pub fn apply_to(&self, mcfg: &mut ModelConfig) {
        mcfg.z_dim = self.z_dim;
        mcfg.c_dim = self.c_dim;
        mcfg.r_dim = self.r_dim;
        mcfg.fc_hidden = self.fc_hidden;
        mcfg.plan_hidden = self.plan_hidden;
        mcfg.tau = self.tau;
        mcfg.sigma_outcome = self.sigma;
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<(), CkptError> {
    let mut out = String::from("cfseq-ckpt v1\n");
    out.push_str(&format!("kind {}\n", meta.kind));
    out.push_str(&format!("fingerprint {}\n", meta.fingerprint));
    out.push_str(&format!("seed {}\n", meta.seed));
    out.push_str(&format!("d_x {}\n", meta.dims.d_x));
    out.push_str(&format!("d_v {}\n", meta.dims.d_v));
    out.push_str(&format!("k {}\n", meta.dims.k));
    out.push_str(&format!("z_dim {}\n", meta.z_dim));
    out.push_str(&format!("c_dim {}\n", meta.c_dim));
    out.push_str(&format!("r_dim {}\n", meta.r_dim));
    out.push_str(&format!("fc_hidden {}\n", meta.fc_hidden));
    out.push_str(&format!("plan_hidden {}\n", meta.plan_hidden));
    out.push_str(&format!("tau {}\n", meta.tau));
    out.push_str(&format!("sigma {}\n", meta.sigma));
    for (name, p) in store.iter() {
        out.push_str(&format!(
            "param {} {} {}",
            name,
            p.trainable as u8,
            p.array.rank()
        ));
        for d in p.array.shape() {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
        let mut first = true;
        for v in p.array.data() {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{v}"));
            first = false;
        }
        out.push('\n');
    }
    out.push_str("end\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta), CkptError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "cfseq-ckpt v1" {
        return Err(CkptError::Malformed(format!("unknown header {header:?}")));
    }
    let mut kind = String::new();
    let mut fingerprint = String::new();
    let mut seed = 0u64;
    let mut nums: std::collections::BTreeMap<String, f64> = Default::default();
    let mut store = ParamStore::new();

    while let Some(line) = lines.next() {
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| CkptError::Malformed("empty line".into()))?;
        match key {
            "kind" => kind = parts.next().unwrap_or_default().to_string(),
            "fingerprint" => fingerprint = parts.next().unwrap_or_default().to_string(),
            "seed" => {
                seed = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| CkptError::Malformed("bad seed".into()))?
            }
            "param" => {
                let name = parts
                    .next()
                    .ok_or_else(|| CkptError::Malformed("param without name".into()))?
                    .to_string();
                let trainable = parts.next() == Some("1");
                let rank: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| CkptError::Malformed(format!("bad rank for {name}")))?;
                let shape: Vec<usize> = (0..rank)
                    .map(|_| {
                        parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| CkptError::Malformed(format!("bad shape for {name}")))
                    })
                    .collect::<Result<_, _>>()?;
                let values_line = lines
                    .next()
                    .ok_or_else(|| CkptError::Malformed(format!("missing values for {name}")))?;
                let data: Vec<f64> = values_line
                    .split_whitespace()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| CkptError::Malformed(format!("bad value in {name}")))
                    })
                    .collect::<Result<_, _>>()?;
                let expected: usize = shape.iter().product();
                if data.len() != expected {
                    return Err(CkptError::Malformed(format!(
                        "{name}: {} values for shape {shape:?}",
                        data.len()
                    )));
                }
                let arr = Array::new(shape, data);
                if trainable {
                    store.insert(name, arr);
                } else {
                    store.insert_aux(name, arr);
                }
            }
            other => {
                let v: f64 = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| CkptError::Malformed(format!("bad meta {other}")))?;
                nums.insert(other.to_string(), v);
            }
        }
    }
    let geti = |k: &str| -> Result<usize, CkptError> {
        nums.get(k)
            .map(|&v| v as usize)
            .ok_or_else(|| CkptError::Malformed(format!("missing meta {k}")))
    };
    let meta = CheckpointMeta {
        kind,
        fingerprint,
        seed,
        dims: ModelDims { d_x: geti("d_x")?, d_v: geti("d_v")?, k: geti("k")? },
        z_dim: geti("z_dim")?,
        c_dim: geti("c_dim")?,
        r_dim: geti("r_dim")?,
        fc_hidden: geti("fc_hidden")?,
        plan_hidden: geti("plan_hidden")?,
        tau: geti("tau")?,
        sigma: *nums
            .get("sigma")
            .ok_or_else(|| CkptError::Malformed("missing meta sigma".into()))?,
    };
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::rng::substream;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "ckpt");
        store.insert("enc.local.l1.v", crate::nn::uniform_init(&[3, 5], 5, &mut rng));
        store.insert_aux("dec.treat.l1.u", crate::nn::uniform_init(&[4], 4, &mut rng));
        let dims = ModelDims { d_x: 4, d_v: 4, k: 4 };
        let meta = CheckpointMeta::new("encoder", "fp123", 7, dims, &ModelConfig::default());
        let dir = std::env::temp_dir().join(format!("cfseq-ckpt-{}", std::process::id()));
        let path = dir.join("enc.ckpt");
        save_checkpoint(&path, &store, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.content_hash(""), store.content_hash(""));
        for (name, p) in store.iter() {
            assert_eq!(back.get(name), &p.array, "{name}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
