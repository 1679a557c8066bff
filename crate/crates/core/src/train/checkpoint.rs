use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, Model, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// [`TrainConfig::hash`] of `config`.
    pub config_hash: String,
    /// Epochs completed over all stages.
    pub epoch: usize,
    /// Last stage that was trained.
    pub stage: Option<Stage>,
    pub w_x: Real,
    pub w_q: Real,
    pub params: Vec<NamedTensor>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &Adam, cfg: &TrainConfig, epoch: usize, stage: Option<Stage>) -> Self {
        let (w_x, w_q) = model.uncertainty();
        let params = model
            .store
            .ids()
            .map(|id| {
                let v = model.store.value(id);
                NamedTensor {
                    name: model.store.name(id).to_string(),
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                }
            })
            .collect();
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            epoch,
            stage,
            w_x,
            w_q,
            params,
            optimizer: optimizer.clone(),
        }
    }

    /// Rebuilds the model and optimizer, checking the stored hash and that
    /// every parameter is present with its expected shape.
    pub fn restore(&self) -> Result<(Model, Adam)> {
        if self.config.hash() != self.config_hash {
            return Err(Error::Config("checkpoint config does not match its hash".into()));
        }
        let mut model = Model::new(&self.config)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, the network has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter '{}' in checkpoint", p.name)))?;
            let t = Tensor::new(&p.shape, p.data.clone())?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::shape(
                    "checkpoint parameter",
                    model.store.value(id).shape(),
                    t.shape(),
                ));
            }
            *model.store.value_mut(id) = t;
        }
        if model.uncertainty() != (self.w_x, self.w_q) {
            return Err(Error::Config(
                "checkpoint w_x / w_q disagree with stored parameters".into(),
            ));
        }
        self.optimizer.check_matches(&model.store)?;
        Ok((model, self.optimizer.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }
}
