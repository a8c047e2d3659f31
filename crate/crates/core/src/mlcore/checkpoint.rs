use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boost::{bt_predict, BtEnsemble};
use super::cnn::{CnnConfig, CnnModel, Forward, Workspace};
use super::{InputShape, ModelInput};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// The latency predictor plus the violation classifier fed by its latent
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub cnn: CnnModel<f64>,
    pub bt: BtEnsemble,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    shape: InputShape,
    config: CnnConfig,
    params: Vec<f64>,
    out_offset: Vec<f64>,
    out_scale: Vec<f64>,
    bt: BtEnsemble,
}

/// Prediction for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub forward: Forward<f64>,
    pub p_violation: f64,
}

impl HybridModel {
    pub fn new(cnn: CnnModel<f64>, bt: BtEnsemble) -> Result<Self> {
        if bt.n_features != cnn.latent_dim() {
            return Err(Error::config(format!(
                "classifier expects {} features but the latent layer has {}",
                bt.n_features,
                cnn.latent_dim()
            )));
        }
        Ok(HybridModel { cnn, bt })
    }

    pub fn shape(&self) -> InputShape {
        self.cnn.config.shape
    }

    pub fn predict(&self, input: &ModelInput<f64>) -> Result<Prediction> {
        let forward = self.cnn.forward(input)?;
        let p_violation = bt_predict(&self.bt, &forward.latent)?;
        Ok(Prediction { forward, p_violation })
    }

    /// Predicted p99 (ms) and violation probability, reusing `ws`.
    pub fn predict_fast(&self, input: &ModelInput<f64>, ws: &mut Workspace<f64>) -> Result<(f64, f64)> {
        self.shape().check(&input.shape)?;
        input.check()?;
        self.cnn.forward_ws(&input.rh, &input.lh, &input.rc, ws);
        let raw = ws.raw_output();
        let j = raw.len() - 1;
        let p99 = self.cnn.out_offset[j] + self.cnn.out_scale[j] * raw[j];
        Ok((p99, bt_predict(&self.bt, ws.latent())?))
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            shape: self.shape(),
            config: self.cnn.config,
            params: self.cnn.params.clone(),
            out_offset: self.cnn.out_offset.clone(),
            out_scale: self.cnn.out_scale.clone(),
            bt: self.bt.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    /// Parses a checkpoint; if `expected` is given the stored shape must
    /// match it.
    pub fn from_json(text: &str, expected: Option<InputShape>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.shape != ck.config.shape {
            return Err(Error::config("checkpoint shape header disagrees with its architecture"));
        }
        if let Some(want) = expected {
            want.check(&ck.shape)?;
        }
        let cnn = CnnModel::from_parts(ck.config, ck.params, ck.out_offset, ck.out_scale)?;
        Self::new(cnn, ck.bt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<InputShape>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, expected)
    }
}
