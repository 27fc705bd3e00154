//! Experiment configuration: a TOML file with generator, model and run
//! sections. Unknown keys are rejected, defaults are filled, and the
//! (generator, model) pair is fingerprinted so downstream stages can refuse
//! mismatched artifacts.

use cfseq_core::model::{Balancing, MiKind, ModelConfig};
use cfseq_core::simkit::{EhrConfig, GeneratorConfig, TumorConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(String, std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_gamma() -> f64 {
    1.0
}
fn default_n_train() -> usize {
    1000
}
fn default_n_val() -> usize {
    100
}
fn default_n_test() -> usize {
    500
}
fn default_max_len() -> usize {
    60
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    /// "tumor" or "ehr".
    pub kind: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub tumor: TumorSection,
    #[serde(default)]
    pub ehr: EhrSection,
}

/// Tumor prior overrides; defaults mirror `TumorConfig::default`.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TumorSection {
    pub growth_mean: f64,
    pub growth_sd: f64,
    pub chemo_sens_mean: f64,
    pub chemo_sens_sd: f64,
    pub radio_sens_mean: f64,
    pub radio_sens_sd: f64,
    pub radio_quad_ratio: f64,
    pub noise_sd: f64,
    pub chemo_dose: f64,
    pub radio_dose: f64,
}

impl Default for TumorSection {
    fn default() -> Self {
        let c = TumorConfig::default();
        TumorSection {
            growth_mean: c.growth_mean,
            growth_sd: c.growth_sd,
            chemo_sens_mean: c.chemo_sens_mean,
            chemo_sens_sd: c.chemo_sens_sd,
            radio_sens_mean: c.radio_sens_mean,
            radio_sens_sd: c.radio_sens_sd,
            radio_quad_ratio: c.radio_quad_ratio,
            noise_sd: c.noise_sd,
            chemo_dose: c.chemo_dose,
            radio_dose: c.radio_dose,
        }
    }
}

/// EHR generator overrides; defaults mirror `EhrConfig::default`.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EhrSection {
    pub d_x: usize,
    pub d_y: usize,
    pub d_a: usize,
    pub noise_sd: f64,
    pub gamma_assign: Vec<f64>,
    pub gamma_cov: Vec<f64>,
    pub effect_window: usize,
    pub assign_driver_dims: Vec<usize>,
}

impl Default for EhrSection {
    fn default() -> Self {
        let c = EhrConfig::default();
        EhrSection {
            d_x: c.d_x,
            d_y: c.d_y,
            d_a: c.d_a,
            noise_sd: c.noise_sd,
            gamma_assign: c.gamma_assign,
            gamma_cov: c.gamma_cov,
            effect_window: c.effect_window,
            assign_driver_dims: c.assign_driver_dims,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub z_dim: usize,
    pub c_dim: usize,
    pub r_dim: usize,
    pub fc_hidden: usize,
    pub plan_hidden: usize,
    pub tau: usize,
    pub sigma: f64,
    pub enc_lr: f64,
    pub enc_batch: usize,
    pub enc_max_epochs: usize,
    pub enc_patience: usize,
    pub enc_min_delta: f64,
    pub dec_lr: f64,
    pub enc_finetune_scale: f64,
    pub treat_lr: f64,
    pub treat_momentum: f64,
    pub dec_batch: usize,
    pub dec_max_epochs: usize,
    pub dec_patience: usize,
    pub dec_min_delta: f64,
    pub origin_frac: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub use_cpc: bool,
    pub use_infomax: bool,
    /// "club", "cdc" or "off".
    pub balancing: String,
    /// "infonce", "nwj" or "mine".
    pub mi: String,
    pub naive_baseline: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            z_dim: m.z_dim,
            c_dim: m.c_dim,
            r_dim: m.r_dim,
            fc_hidden: m.fc_hidden,
            plan_hidden: m.plan_hidden,
            tau: m.tau,
            sigma: m.sigma_outcome,
            enc_lr: m.enc_lr,
            enc_batch: m.enc_batch,
            enc_max_epochs: m.enc_max_epochs,
            enc_patience: m.enc_patience,
            enc_min_delta: m.enc_min_delta,
            dec_lr: m.dec_lr,
            enc_finetune_scale: m.enc_finetune_scale,
            treat_lr: m.treat_lr,
            treat_momentum: m.treat_momentum,
            dec_batch: m.dec_batch,
            dec_max_epochs: m.dec_max_epochs,
            dec_patience: m.dec_patience,
            dec_min_delta: m.dec_min_delta,
            origin_frac: m.origin_frac,
            weight_decay: m.weight_decay,
            grad_clip: 0.0,
            use_cpc: true,
            use_infomax: true,
            balancing: "club".into(),
            mi: "infonce".into(),
            naive_baseline: false,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_data_seed() -> u64 {
    42
}
fn default_workers() -> usize {
    2
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Subsampling stride over evaluation origins (1 = exhaustive).
    #[serde(default = "default_stride")]
    pub eval_origin_stride: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: default_seeds(),
            data_seed: default_data_seed(),
            workers: default_workers(),
            eval_origin_stride: default_stride(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.tau < 1 {
            return Err(ConfigError::Invalid("model.tau must be at least 1".into()));
        }
        if m.enc_batch < 2 || m.dec_batch < 2 {
            return Err(ConfigError::Invalid(
                "model.enc_batch and model.dec_batch must be at least 2".into(),
            ));
        }
        if m.sigma <= 0.0 {
            return Err(ConfigError::Invalid("model.sigma must be positive".into()));
        }
        if Balancing_from(&m.balancing).is_none() {
            return Err(ConfigError::Invalid(format!(
                "model.balancing must be club, cdc or off, got {}",
                m.balancing
            )));
        }
        if mi_from(&m.mi).is_none() {
            return Err(ConfigError::Invalid(format!(
                "model.mi must be infonce, nwj or mine, got {}",
                m.mi
            )));
        }
        match self.generator.kind.as_str() {
            "tumor" | "ehr" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "generator.kind must be tumor or ehr, got {other}"
                )))
            }
        }
        if self.generator.max_len < m.tau + 6 {
            return Err(ConfigError::Invalid(
                "generator.max_len must be at least model.tau + 6".into(),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Content fingerprint of the generator and model sections; the run
    /// section (seeds, workers, output paths) deliberately does not bind.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Bound<'a> {
            generator: &'a GeneratorSection,
            model: &'a ModelSection,
        }
        let canon = toml::to_string(&Bound { generator: &self.generator, model: &self.model })
            .expect("config serializes");
        format!("{:016x}", cfseq_core::simkit::rng::fnv64(canon.as_bytes()))
    }

    /// Generator configuration for one split of n units.
    pub fn generator_config(&self) -> GeneratorConfig {
        let min_len = self.model.tau + 5;
        match self.generator.kind.as_str() {
            "tumor" => {
                let t = &self.generator.tumor;
                GeneratorConfig::Tumor(TumorConfig {
                    gamma: self.generator.gamma,
                    n_units: self.generator.n_train,
                    max_len: self.generator.max_len,
                    min_len,
                    growth_mean: t.growth_mean,
                    growth_sd: t.growth_sd,
                    chemo_sens_mean: t.chemo_sens_mean,
                    chemo_sens_sd: t.chemo_sens_sd,
                    radio_sens_mean: t.radio_sens_mean,
                    radio_sens_sd: t.radio_sens_sd,
                    radio_quad_ratio: t.radio_quad_ratio,
                    noise_sd: t.noise_sd,
                    chemo_dose: t.chemo_dose,
                    radio_dose: t.radio_dose,
                    ..TumorConfig::default()
                })
            }
            "ehr" => {
                let e = &self.generator.ehr;
                GeneratorConfig::Ehr(EhrConfig {
                    n_units: self.generator.n_train,
                    max_len: self.generator.max_len,
                    min_len,
                    d_x: e.d_x,
                    d_y: e.d_y,
                    d_a: e.d_a,
                    noise_sd: e.noise_sd,
                    gamma_assign: e.gamma_assign.clone(),
                    gamma_cov: e.gamma_cov.clone(),
                    effect_window: e.effect_window,
                    assign_driver_dims: e.assign_driver_dims.clone(),
                    ..EhrConfig::default()
                })
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            z_dim: m.z_dim,
            c_dim: m.c_dim,
            r_dim: m.r_dim,
            fc_hidden: m.fc_hidden,
            plan_hidden: m.plan_hidden,
            tau: m.tau,
            sigma_outcome: m.sigma,
            enc_lr: m.enc_lr,
            enc_batch: m.enc_batch,
            enc_max_epochs: m.enc_max_epochs,
            enc_patience: m.enc_patience,
            enc_min_delta: m.enc_min_delta,
            dec_lr: m.dec_lr,
            enc_finetune_scale: m.enc_finetune_scale,
            treat_lr: m.treat_lr,
            treat_momentum: m.treat_momentum,
            dec_batch: m.dec_batch,
            dec_max_epochs: m.dec_max_epochs,
            dec_patience: m.dec_patience,
            dec_min_delta: m.dec_min_delta,
            origin_frac: m.origin_frac,
            weight_decay: m.weight_decay,
            grad_clip: if m.grad_clip > 0.0 { Some(m.grad_clip) } else { None },
            use_cpc: m.use_cpc,
            use_infomax: m.use_infomax,
            balancing: Balancing_from(&m.balancing).expect("validated"),
            mi: mi_from(&m.mi).expect("validated"),
            naive_baseline: m.naive_baseline,
        }
    }

    /// Effective worker count: config capped by CFSEQ_WORKERS when set.
    pub fn workers(&self) -> usize {
        let cap = std::env::var("CFSEQ_WORKERS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(usize::MAX);
        self.run.workers.clamp(1, cap.max(1))
    }
}

#[allow(non_snake_case)]
fn Balancing_from(s: &str) -> Option<Balancing> {
    Some(match s {
        "club" => Balancing::Club,
        "cdc" => Balancing::Cdc,
        "off" => Balancing::Off,
        _ => return None,
    })
}

fn mi_from(s: &str) -> Option<MiKind> {
    Some(match s {
        "infonce" => MiKind::InfoNce,
        "nwj" => MiKind::Nwj,
        "mine" => MiKind::Mine,
        _ => return None,
    })
}
