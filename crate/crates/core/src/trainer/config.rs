use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoders::ModelConfig;
use crate::evalkit::EvalConfig;
use crate::objectives::LossWeights;
use crate::witg::SamplerConfig;

/// Prefix of environment variables that override config keys, e.g.
/// `GCL4SR_LEARNING_RATE=0.01`.
pub const ENV_PREFIX: &str = "GCL4SR_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoGcl,
    NoGclNoMmd,
    UnweightedEdges,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoGcl, Ablation::NoGclNoMmd, Ablation::UnweightedEdges];

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGcl => "w/o G",
            Ablation::NoGclNoMmd => "w/o GM",
            Ablation::UnweightedEdges => "w/o W",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGcl => "no_gcl",
            Ablation::NoGclNoMmd => "no_gcl_no_mmd",
            Ablation::UnweightedEdges => "unweighted_edges",
        }
    }
}

/// Every training hyper-parameter. The default batch size suits small
/// corpora; large ones are usually trained with 256-1024.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub l2: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// The rate is multiplied by `lr_decay_factor` every
    /// `lr_decay_interval` epochs; 0 disables decay.
    pub lr_decay_interval: usize,
    pub lr_decay_factor: f64,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub rho: f64,
    pub gcl_symmetric: bool,
    pub median_bandwidth: bool,
    pub sample_depth: usize,
    pub sample_size: usize,
    /// Draw fresh views every epoch instead of once per training row.
    pub resample_per_epoch: bool,
    pub ablation: Ablation,
    /// HR/NDCG cutoffs reported during validation and evaluation.
    pub ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 5e-5,
            max_epochs: 300,
            patience: 20,
            lr_decay_interval: 20,
            lr_decay_factor: 0.5,
            dim: 64,
            heads: 2,
            layers: 2,
            max_len: 50,
            dropout: 0.2,
            lambda1: 0.1,
            lambda2: 0.1,
            tau: 0.5,
            rho: 1.0,
            gcl_symmetric: true,
            median_bandwidth: false,
            sample_depth: 2,
            sample_size: 20,
            resample_per_epoch: true,
            ablation: Ablation::Full,
            ks: vec![10, 20],
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `GCL4SR_<KEY>` overrides; values are parsed as TOML, falling
    /// back to a bare string.
    pub fn with_env_overrides(&self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, TrainError> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| cfg_err(e.to_string()))?;
        let mut touched = false;
        for (k, v) in vars {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(v.clone()));
            table.insert(key, value);
            touched = true;
        }
        if !touched {
            return Ok(self.clone());
        }
        let text = toml::to_string(&table).map_err(|e| cfg_err(e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| cfg_err(format!("environment override: {e}")))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(cfg_err("learning_rate must be finite and >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(cfg_err("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.l2.is_nan() || self.l2 < 0.0 {
            return Err(cfg_err("eps must be > 0 and l2 >= 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(cfg_err("lr_decay_factor must lie in (0, 1]"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(cfg_err("ks must be non-empty positive cutoffs"));
        }
        self.base_weights().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.model_config(1, 1).validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(())
    }

    fn base_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            rho: self.rho,
            symmetric: self.gcl_symmetric,
            median_bandwidth: self.median_bandwidth,
        }
    }

    pub fn model_config(&self, item_count: usize, user_count: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            max_len: self.max_len,
            dropout: self.dropout,
            item_count,
            user_count,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { depth: self.sample_depth, size: self.sample_size, seed: self.seed }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.ks.clone(),
            seed: self.seed,
            depth: self.sample_depth,
            size: self.sample_size,
            weighted: apply_ablation(self).weighted_edges,
        }
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_interval == 0 || epoch == 0 {
            return self.learning_rate;
        }
        let drops = (epoch - 1) / self.lr_decay_interval;
        self.learning_rate * self.lr_decay_factor.powi(drops as i32)
    }
}

/// Loss weights and edge mode after applying the configured ablation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveConfig {
    pub weights: LossWeights,
    pub weighted_edges: bool,
}

pub fn apply_ablation(cfg: &TrainConfig) -> EffectiveConfig {
    let mut weights = cfg.base_weights();
    let mut weighted_edges = true;
    match cfg.ablation {
        Ablation::Full => {}
        Ablation::NoGcl => weights.lambda1 = 0.0,
        Ablation::NoGclNoMmd => {
            weights.lambda1 = 0.0;
            weights.lambda2 = 0.0;
        }
        Ablation::UnweightedEdges => weighted_edges = false,
    }
    EffectiveConfig { weights, weighted_edges }
}
