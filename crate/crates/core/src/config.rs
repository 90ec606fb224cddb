//! Experiment configuration file (TOML).
//!
//! ```toml
//! layers = ["drivable+lane", "lane+agents", "drivable", "agents"]
//! k_list = [5, 10]
//!
//! [raster]
//! size_px = 64
//! extent_m = 100.0
//! target_offset = [0.5, 0.8]
//!
//! [model]
//! conv_channels = [4, 8, 8]
//! hypotheses = 12
//! modes = 12
//!
//! [train]
//! learning_rate = 1e-4
//! batch_size = 100
//! epochs = 20
//! loss = "angle_scaled"
//!
//! [data]
//! horizon_s = 6.0
//! frequency_hz = 2.0
//!
//! [metrics]
//! miss_threshold_m = 2.0
//! ```
//!
//! Every section and key is optional. `model.raster_size`, `model.backbones`
//! and `model.horizon` are always derived from `raster.size_px`, the number of
//! layers and the data horizon.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricOptions;
use crate::net::ArchConfig;
use crate::raster::{LayerSpec, RasterConfig};
use crate::scenegen::GenParams;
use crate::train::{ModelSetup, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub layers: Vec<LayerSpec>,
    pub k_list: Vec<usize>,
    pub raster: RasterConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub data: GenParams,
    pub metrics: MetricOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            layers: LayerSpec::default_specs(),
            k_list: vec![5, 10],
            raster: RasterConfig::default(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            data: GenParams::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", source.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The model setup implied by this config, with derived fields filled in.
    pub fn setup(&self) -> Result<ModelSetup> {
        let arch = ArchConfig {
            raster_size: self.raster.size_px,
            backbones: self.layers.len(),
            horizon: self.data.horizon_steps()?,
            ..self.model.clone()
        };
        let setup = ModelSetup {
            arch,
            raster: self.raster.clone(),
            layers: self.layers.clone(),
        };
        setup.validate()?;
        Ok(setup)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("at least one raster layer is required".into()));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Config(format!("invalid k_list {:?}", self.k_list)));
        }
        self.data.validate()?;
        self.train.validate()?;
        self.setup().map(|_| ())
    }
}
