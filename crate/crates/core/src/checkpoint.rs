use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, Kind};
use crate::data::{SampleConfig, Scaler};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const PARAM_PREFIX: &str = "param/";

/// A trained model with everything needed to score new data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub scaler: Option<Scaler>,
    pub seed: u64,
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub train_config: Option<TrainConfig>,
    pub sample_config: Option<SampleConfig>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    trained: bool,
    seed: u64,
    epoch: usize,
    val_history: Vec<f64>,
    train_config: Option<TrainConfig>,
    sample_config: Option<SampleConfig>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            scaler: None,
            seed: 0,
            epoch: 0,
            val_history: Vec::new(),
            train_config: None,
            sample_config: None,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = Meta {
            spec: self.model.spec().clone(),
            trained: self.model.is_trained(),
            seed: self.seed,
            epoch: self.epoch,
            val_history: self.val_history.clone(),
            train_config: self.train_config.clone(),
            sample_config: self.sample_config,
        };
        let mut c = Container::new(Kind::Checkpoint, serde_json::to_value(meta)?);
        for e in self.model.params().entries() {
            c.push(format!("{PARAM_PREFIX}{}", e.key()), e.value.clone());
        }
        if let Some(s) = &self.scaler {
            c.push("scaler", Tensor::vector(s.to_vec()));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        let params = c
            .arrays
            .iter()
            .filter_map(|(name, t)| name.strip_prefix(PARAM_PREFIX).map(|k| (k.to_string(), t.clone())))
            .collect();
        let model = Model::from_parts(meta.spec, params, meta.trained)?;
        let scaler = c
            .arrays
            .iter()
            .find(|(n, _)| n == "scaler")
            .map(|(_, t)| Scaler::from_slice(t.data()))
            .transpose()?;
        Ok(Self {
            model,
            scaler,
            seed: meta.seed,
            epoch: meta.epoch,
            val_history: meta.val_history,
            train_config: meta.train_config,
            sample_config: meta.sample_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, Kind::Checkpoint)?)
    }

    /// Load and require the stored spec to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelSpec) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.spec() != expected {
            return Err(Error::SpecConflict {
                expected: serde_json::to_string(expected)?,
                found: serde_json::to_string(ck.model.spec())?,
            });
        }
        Ok(ck)
    }
}
