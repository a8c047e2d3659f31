//! Numeric core: the convolutional latency predictor, its SGD trainer,
//! gradient checking, the boosted-trees violation classifier, and the
//! least-squares routines shared with the linear baseline and the local
//! surrogate explainer.

mod boost;
mod checkpoint;
mod cnn;
mod dataset;
mod gradcheck;
mod hybrid;
mod linear;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast_vec, Scalar};

pub use boost::{bt_predict, bt_train, BtEnsemble, BtHyper, BtTraining, Node, Tree};
pub use checkpoint::{HybridModel, Prediction, CHECKPOINT_VERSION};
pub use cnn::{CnnConfig, CnnModel, Forward, Workspace};
pub use dataset::{split_dataset, Dataset, DatasetHeader, Sample, Split, DATASET_SCHEMA_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use hybrid::{latents, train_hybrid, ClassifierMetrics, HybridHyper, HybridTraining};
pub use linear::{least_squares, r_squared, LeastSquares, LinearBaseline, RIDGE_FALLBACK};
pub use train::{cnn_train, evaluate_rmse, TrainHyper, TrainReport};

/// Dimensions of the model inputs: `X_RH` is `n_tiers × history ×
/// channels`, `X_LH` is `history × 5`, `X_RC` is `n_tiers × 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub n_tiers: usize,
    pub history: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn rh_len(&self) -> usize {
        self.n_tiers * self.history * self.channels
    }

    pub fn lh_len(&self) -> usize {
        self.history * crate::telemetry::N_PERCENTILES
    }

    pub fn rc_len(&self) -> usize {
        self.n_tiers * 2
    }

    pub fn flat_len(&self) -> usize {
        self.rh_len() + self.lh_len() + self.rc_len()
    }

    pub fn check(&self, other: &InputShape) -> Result<()> {
        if self != other {
            return Err(Error::config(format!(
                "input shape mismatch: model expects {self:?}, got {other:?}"
            )));
        }
        Ok(())
    }
}

/// One set of model input tensors, row-major:
/// `rh[(tier * history + t) * channels + c]`, `lh[t * 5 + p]`,
/// `rc[tier * 2 + {0: cores, 1: freq}]`. Row `t = history - 1` is newest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput<S> {
    pub shape: InputShape,
    pub rh: Vec<S>,
    pub lh: Vec<S>,
    pub rc: Vec<S>,
}

impl<S: Scalar> ModelInput<S> {
    pub fn cast<T: Scalar>(&self) -> ModelInput<T> {
        ModelInput {
            shape: self.shape,
            rh: cast_vec(&self.rh),
            lh: cast_vec(&self.lh),
            rc: cast_vec(&self.rc),
        }
    }

    pub fn check(&self) -> Result<()> {
        let s = &self.shape;
        if self.rh.len() != s.rh_len() || self.lh.len() != s.lh_len() || self.rc.len() != s.rc_len() {
            return Err(Error::config("tensor lengths disagree with their shape header"));
        }
        Ok(())
    }

    /// `[rh, lh, rc]` concatenated.
    pub fn flatten(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.shape.flat_len());
        v.extend_from_slice(&self.rh);
        v.extend_from_slice(&self.lh);
        v.extend_from_slice(&self.rc);
        v
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
