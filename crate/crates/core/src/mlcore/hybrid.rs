use serde::{Deserialize, Serialize};

use super::boost::{bt_train, BtHyper};
use super::checkpoint::HybridModel;
use super::cnn::CnnModel;
use super::dataset::Sample;
use super::train::{cnn_train, TrainHyper, TrainReport};
use super::InputShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HybridHyper {
    pub cnn: TrainHyper,
    pub bt: BtHyper,
}

#[derive(Debug, Clone)]
pub struct HybridTraining {
    pub model: HybridModel,
    pub cnn_report: TrainReport,
    /// Training log-loss of the classifier after each round.
    pub bt_logloss: Vec<f64>,
}

/// Confusion counts of the violation classifier at threshold 0.5. The
/// FP and FN rates are fractions of all evaluated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub samples: usize,
    pub positives: usize,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

impl ClassifierMetrics {
    pub fn from_predictions(predicted: &[bool], labels: &[u8]) -> Self {
        let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let n = predicted.len().min(labels.len());
        let frac = |k: usize| if n > 0 { k as f64 / n as f64 } else { 0.0 };
        ClassifierMetrics {
            samples: n,
            positives: tp + fneg,
            true_pos: tp,
            false_pos: fp,
            true_neg: tn,
            false_neg: fneg,
            accuracy: frac(tp + tn),
            fp_rate: frac(fp),
            fn_rate: frac(fneg),
        }
    }

    pub fn evaluate(model: &HybridModel, samples: &[Sample]) -> Result<Self> {
        let shape = model.shape();
        let mut ws = model.cnn.workspace();
        let mut predicted = Vec::with_capacity(samples.len());
        for s in samples {
            let (_, pv) = model.predict_fast(&s.input(shape), &mut ws)?;
            predicted.push(pv >= 0.5);
        }
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        Ok(Self::from_predictions(&predicted, &labels))
    }
}

/// Latent-layer activations of `model` for every sample.
pub fn latents(model: &CnnModel<f64>, samples: &[Sample]) -> Vec<Vec<f64>> {
    let mut ws = model.workspace();
    samples
        .iter()
        .map(|s| {
            model.forward_ws(&s.rh, &s.lh, &s.rc, &mut ws);
            ws.latent().to_vec()
        })
        .collect()
}

/// Trains the latency predictor, then the violation classifier on its
/// latent layer. Training sets holding a single label class are refused.
pub fn train_hybrid(samples: &[Sample], shape: InputShape, hyper: &HybridHyper) -> Result<HybridTraining> {
    let positives = samples.iter().filter(|s| s.label == 1).count();
    if !samples.is_empty() && (positives == 0 || positives == samples.len()) {
        return Err(Error::input(format!(
            "training labels are single-class ({} of {} samples are violations); the classifier needs both",
            positives,
            samples.len()
        )));
    }
    let (cnn, cnn_report) = cnn_train(samples, shape, &hyper.cnn)?;
    let x = latents(&cnn, samples);
    let y: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let bt = bt_train(&x, &y, &hyper.bt)?;
    Ok(HybridTraining {
        model: HybridModel::new(cnn, bt.ensemble)?,
        cnn_report,
        bt_logloss: bt.train_logloss,
    })
}
