//! The run configuration file (TOML). Every section is optional and every
//! key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use crc_core::affine::{HestonParams, JumpSpec, MarketState};
use crc_core::datagen::SamplingBounds;
use crc_core::neural::TrainConfig;
use crc_core::pricing::DampingConfig;
use crc_core::sim::SimConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub bounds: SamplingBounds,
    pub damping: DampingConfig,
    pub nn1: NetConfig,
    pub nn2: NetConfig,
    pub sim: SimConfig,
    /// Model the simulation starts from.
    pub start: ModelConfig,
    pub paths: Paths,
}

/// Architecture and training settings of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub n_main_layers: usize,
    pub width: usize,
    pub residual: bool,
    pub batch_norm: bool,
    /// Weight initialisation seed.
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_main_layers: 2,
            width: 256,
            residual: true,
            batch_norm: true,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// A Bates model with one jump law shared by all maturity buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub spot: f64,
    pub v0: f64,
    pub r: f64,
    pub q: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub lambda: f64,
    pub nu: f64,
    pub delta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spot: 100.0,
            v0: 0.0001,
            r: 0.0205,
            q: 0.03,
            kappa: 7.797,
            theta: 0.247,
            sigma: 0.280,
            rho: 0.042,
            lambda: 0.081,
            nu: 0.159,
            delta: 0.205,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> crc_core::Result<(MarketState, HestonParams, JumpSpec)> {
        if !(self.spot > 0.0 && self.spot.is_finite()) {
            return Err(crc_core::Error::InvalidParameter(format!("spot {} must be positive", self.spot)));
        }
        let p = HestonParams::new(self.r, self.q, self.kappa, self.theta, self.sigma, self.rho)?;
        let j = JumpSpec::uniform(self.lambda, self.nu, self.delta)?;
        Ok((MarketState::from_spot(self.spot, self.v0), p, j))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub nn1: Option<PathBuf>,
    pub nn2: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate().map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crc_core::Result<()> {
        self.bounds.validate()?;
        self.damping.validate()?;
        self.nn1.train.validate()?;
        self.nn2.train.validate()?;
        self.sim.validate()?;
        for net in [&self.nn1, &self.nn2] {
            if net.n_main_layers == 0 || net.width == 0 {
                return Err(crc_core::Error::InvalidParameter("networks need at least one layer of width one".into()));
            }
        }
        Ok(())
    }
}
