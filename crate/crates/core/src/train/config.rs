use serde::{Deserialize, Serialize};

use crate::datagen::SynthesisParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::DffnConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    Ramp,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    /// Epochs per halving.
    pub lr_half_period: usize,
    pub lr_mode: LrMode,
    pub epochs: usize,
    /// Stops after this many iterations even if epochs remain.
    pub max_iterations: Option<usize>,
    pub batch: usize,
    pub crop_size: usize,
    pub flips: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Validate every this many iterations (0 = only at the end).
    pub val_interval: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_half_period: 100,
            lr_mode: LrMode::Ramp,
            epochs: 100,
            max_iterations: None,
            batch: 4,
            crop_size: 64,
            flips: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_interval: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return Err(Error::Config(format!("crop_size must be a positive multiple of 8, got {}", self.crop_size)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        self.loss.validate()
    }
}

/// Everything a CLI config file may hold, one table per concern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: DffnConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisParams,
}

impl RunConfig {
    /// Accepts either a full file with `[network]`/`[train]`/`[synthesis]`
    /// tables or a bare network table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = match toml::from_str(text) {
            Ok(c) => c,
            Err(full_err) => match toml::from_str::<DffnConfig>(text) {
                Ok(network) => Self { network, ..Self::default() },
                Err(_) => return Err(Error::Config(full_err.to_string())),
            },
        };
        cfg.network.validate()?;
        cfg.train.validate()?;
        cfg.synthesis.validate()?;
        Ok(cfg)
    }
}
