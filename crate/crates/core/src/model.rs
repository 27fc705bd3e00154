//! Model hyperparameters and dimension bookkeeping shared by the encoder,
//! decoder and evaluation layers.

/// Which mutual-information objective drives the contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiKind {
    InfoNce,
    Nwj,
    Mine,
}

/// How the representation is pushed to be treatment-invariant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balancing {
    /// Contrastive log-ratio upper bound, the default adversarial game.
    Club,
    /// Uniform-target cross-entropy stand-in for the domain-confusion loss;
    /// an approximation wired behind the ablation flag.
    Cdc,
    Off,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub z_dim: usize,
    pub c_dim: usize,
    pub r_dim: usize,
    pub fc_hidden: usize,
    pub plan_hidden: usize,
    pub tau: usize,
    /// Fixed Gaussian scale of the outcome likelihood.
    pub sigma_outcome: f64,
    pub enc_lr: f64,
    pub enc_batch: usize,
    pub enc_max_epochs: usize,
    pub enc_patience: usize,
    pub enc_min_delta: f64,
    pub dec_lr: f64,
    /// Encoder fine-tuning rate = dec_lr * this scale during decoder training.
    pub enc_finetune_scale: f64,
    pub treat_lr: f64,
    pub treat_momentum: f64,
    pub dec_batch: usize,
    pub dec_max_epochs: usize,
    pub dec_patience: usize,
    pub dec_min_delta: f64,
    /// Fraction of usable origins rolled out per unit and batch.
    pub origin_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub use_cpc: bool,
    pub use_infomax: bool,
    pub balancing: Balancing,
    pub mi: MiKind,
    /// Sanity lower bar: skip pretraining and balancing entirely.
    pub naive_baseline: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            z_dim: 16,
            c_dim: 16,
            r_dim: 16,
            fc_hidden: 16,
            plan_hidden: 6,
            tau: 10,
            sigma_outcome: 0.05,
            enc_lr: 1e-3,
            enc_batch: 256,
            enc_max_epochs: 300,
            enc_patience: 100,
            enc_min_delta: 0.001,
            dec_lr: 1e-3,
            enc_finetune_scale: 0.1,
            treat_lr: 0.01,
            treat_momentum: 0.9,
            dec_batch: 128,
            dec_max_epochs: 500,
            dec_patience: 50,
            dec_min_delta: 0.001,
            origin_frac: 0.10,
            weight_decay: 0.0,
            grad_clip: None,
            use_cpc: true,
            use_infomax: true,
            balancing: Balancing::Club,
            mi: MiKind::InfoNce,
            naive_baseline: false,
        }
    }
}

/// Ablation switches accepted by the orchestrator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoCpc,
    NoInfomax,
    CdcLoss,
    NoBalancing,
    Nwj,
    Mine,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => AblationVariant::Full,
            "no_cpc" => AblationVariant::NoCpc,
            "no_infomax" => AblationVariant::NoInfomax,
            "cdc_loss" => AblationVariant::CdcLoss,
            "no_balancing" => AblationVariant::NoBalancing,
            "nwj" => AblationVariant::Nwj,
            "mine" => AblationVariant::Mine,
            _ => return None,
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoCpc => "no_cpc",
            AblationVariant::NoInfomax => "no_infomax",
            AblationVariant::CdcLoss => "cdc_loss",
            AblationVariant::NoBalancing => "no_balancing",
            AblationVariant::Nwj => "nwj",
            AblationVariant::Mine => "mine",
        }
    }

    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoCpc => out.use_cpc = false,
            AblationVariant::NoInfomax => out.use_infomax = false,
            AblationVariant::CdcLoss => out.balancing = Balancing::Cdc,
            AblationVariant::NoBalancing => out.balancing = Balancing::Off,
            AblationVariant::Nwj => out.mi = MiKind::Nwj,
            AblationVariant::Mine => out.mi = MiKind::Mine,
        }
        out
    }
}

/// Data-derived dimensions the networks are shaped by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_v: usize,
    pub k: usize,
}

impl ModelDims {
    /// Per-step component dimension: [V, X_t, one-hot W_{t-1}, Y_{t-1}].
    pub fn d_u(&self) -> usize {
        self.d_v + self.d_x + self.k + 1
    }
}
