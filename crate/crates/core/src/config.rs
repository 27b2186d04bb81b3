//! Lab configuration file.
//!
//! TOML, every key optional; omitted keys take the defaults below.
//!
//! ```toml
//! [predictors]
//! pht_size = 1024
//! btb_entries = 256
//! rsb_depth = 16
//!
//! [cache]
//! line_size = 64
//! sets = 64
//! ways = 8
//! hit_latency = 40
//! miss_latency = 300
//! jitter = 0
//! jitter_seed = 0
//!
//! [pipeline]
//! window = 64
//! store_bypass = true
//! max_steps = 1000000
//! variants = { pht = true, btb = true, rsb = true, stl = true }
//!
//! [attack]
//! training = 8
//! max_rounds = 4
//! secret = "SpeculativeLab!!"
//!
//! [receiver]
//! threshold = 170          # defaults to the hit/miss midpoint
//! magic = 0x5350454354524521
//!
//! [layout]
//! image_size = 4194304
//! aslr_seed = 7            # optional
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, CacheError};
use crate::gadgets::{standard_layout, GadgetError, MemoryLayout, DEFAULT_IMAGE_SIZE, DEFAULT_MAGIC, DEFAULT_TRAINING, MAX_SECRET_LEN};
use crate::pipeline::{MicroArchState, PipelineConfig, VariantSet, DEFAULT_MAX_STEPS};
use crate::predictors::StoreBypassPolicy;

pub const DEFAULT_SECRET: &str = "SpeculativeLab!!";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid cache settings: {0}")]
    Cache(#[from] CacheError),
    #[error("invalid layout: {0}")]
    Layout(#[from] GadgetError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSettings {
    pub pht_size: usize,
    pub btb_entries: usize,
    pub rsb_depth: usize,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings { pht_size: 1024, btb_entries: 256, rsb_depth: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub window: usize,
    pub store_bypass: bool,
    pub max_steps: u64,
    pub variants: VariantSet,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings { window: 64, store_bypass: true, max_steps: DEFAULT_MAX_STEPS, variants: VariantSet::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    /// Training invocations before each exploit round.
    pub training: usize,
    /// Exploit rounds per byte before giving up.
    pub max_rounds: usize,
    pub secret: String,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings { training: DEFAULT_TRAINING, max_rounds: 4, secret: DEFAULT_SECRET.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSettings {
    pub threshold: Option<u64>,
    pub magic: u64,
}

impl Default for ReceiverSettings {
    fn default() -> Self {
        ReceiverSettings { threshold: None, magic: DEFAULT_MAGIC }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSettings {
    pub image_size: u64,
    pub aslr_seed: Option<u64>,
}

impl Default for LayoutSettings {
    fn default() -> Self {
        LayoutSettings { image_size: DEFAULT_IMAGE_SIZE, aslr_seed: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub predictors: PredictorSettings,
    pub cache: CacheConfig,
    pub pipeline: PipelineSettings,
    pub attack: AttackSettings,
    pub receiver: ReceiverSettings,
    pub layout: LayoutSettings,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<LabConfig, ConfigError> {
        let cfg: LabConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LabConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        LabConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cache.validate()?;
        self.cache.check_threshold(self.threshold())?;
        let p = &self.predictors;
        for (name, v) in [("pht_size", p.pht_size), ("btb_entries", p.btb_entries)] {
            if !v.is_power_of_two() {
                return Err(ConfigError::Invalid(format!("predictors.{name} must be a power of two, got {v}")));
            }
        }
        if self.attack.training == 0 {
            return Err(ConfigError::Invalid("attack.training must be at least 1".into()));
        }
        if self.attack.max_rounds == 0 {
            return Err(ConfigError::Invalid("attack.max_rounds must be at least 1".into()));
        }
        if self.attack.secret.len() > MAX_SECRET_LEN {
            return Err(ConfigError::Layout(GadgetError::SecretTooLong(self.attack.secret.len())));
        }
        standard_layout(self.layout.image_size, self.layout.aslr_seed)?;
        Ok(())
    }

    pub fn threshold(&self) -> u64 {
        self.receiver.threshold.unwrap_or_else(|| self.cache.default_threshold())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            window: self.pipeline.window,
            variants: self.pipeline.variants,
            store_bypass: StoreBypassPolicy { enabled: self.pipeline.store_bypass },
            max_steps: self.pipeline.max_steps,
        }
    }

    pub fn machine(&self) -> Result<MicroArchState, ConfigError> {
        let p = &self.predictors;
        Ok(MicroArchState::new(self.cache.clone(), p.pht_size, p.btb_entries, p.rsb_depth)?)
    }

    /// Layout carrying `secret` and the configured magic value.
    pub fn layout(&self, secret: &[u8]) -> Result<MemoryLayout, ConfigError> {
        Ok(standard_layout(self.layout.image_size, self.layout.aslr_seed)?
            .with_secret(secret)?
            .with_magic(self.receiver.magic))
    }
}
