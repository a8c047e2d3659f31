use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::{CnnConfig, CnnModel};
use super::dataset::Sample;
use super::InputShape;
use crate::error::{Error, Result};

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Batch gradients longer than this (L2) are rescaled to it; 0 disables.
    pub clip_norm: f64,
    /// Learning rate in the last epoch as a fraction of `lr`; the rate
    /// follows a half cosine in between. 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.01,
            momentum: 0.9,
            batch: 64,
            epochs: 50,
            clip_norm: 1.0,
            final_lr_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss on the training set before the first update.
    pub initial_loss: f64,
    /// Mean per-sample loss over each epoch's mini-batches.
    pub epoch_loss: Vec<f64>,
    /// Mean per-sample loss on the training set after the last update.
    pub final_loss: f64,
    pub samples: usize,
    pub params: usize,
    #[serde(skip)]
    pub seconds: f64,
}

/// Per-output mean and standard deviation of the targets, used as the
/// model's output transform. Near-constant outputs get unit scale.
fn target_transform(samples: &[Sample]) -> (Vec<f64>, Vec<f64>) {
    let k = samples[0].percentiles.len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(&s.percentiles) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; k];
    for s in samples {
        for j in 0..k {
            let d = s.percentiles[j] - mean[j];
            var[j] += d * d / n;
        }
    }
    let scale = var
        .iter()
        .map(|&v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

fn mean_loss(model: &CnnModel<f64>, samples: &[Sample]) -> f64 {
    let mut ws = model.workspace();
    let total: f64 = samples
        .iter()
        .map(|s| model.loss(&s.rh, &s.lh, &s.rc, &s.percentiles, &mut ws))
        .sum();
    total / samples.len() as f64
}

/// Trains a fresh predictor on `samples` with mini-batch SGD + momentum on
/// the mean squared error of the standardized outputs.
///
/// Fails with a numeric error as soon as a batch loss is not finite.
pub fn cnn_train(samples: &[Sample], shape: InputShape, hyper: &TrainHyper) -> Result<(CnnModel<f64>, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if hyper.batch == 0
        || !(hyper.lr > 0.0)
        || !(0.0..1.0).contains(&hyper.momentum)
        || !(0.0..=1.0).contains(&hyper.final_lr_fraction)
    {
        return Err(Error::config(format!("invalid training hyperparameters {hyper:?}")));
    }
    for s in samples {
        if s.rh.len() != shape.rh_len() || s.lh.len() != shape.lh_len() || s.rc.len() != shape.rc_len() {
            return Err(Error::config("sample tensors disagree with the model shape"));
        }
    }
    let started = Instant::now();
    let mut model = CnnModel::<f64>::new(CnnConfig::new(shape), hyper.seed);
    let (offset, scale) = target_transform(samples);
    model.out_offset = offset;
    model.out_scale = scale;

    let initial_loss = mean_loss(&model, samples);
    let n_params = model.param_count();
    let mut grad = vec![0.0; n_params];
    let mut velocity = vec![0.0; n_params];
    let mut ws = model.workspace();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let progress = if hyper.epochs > 1 {
            epoch as f64 / (hyper.epochs - 1) as f64
        } else {
            0.0
        };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr = hyper.lr * (hyper.final_lr_fraction + (1.0 - hyper.final_lr_fraction) * cosine);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &samples[i];
                batch_loss += model.loss_and_grad(&s.rh, &s.lh, &s.rc, &s.percentiles, w, &mut ws, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training loss became {batch_loss} in epoch {epoch} (learning rate {} too high?)",
                    hyper.lr
                )));
            }
            total += batch_loss;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if hyper.clip_norm > 0.0 && norm > hyper.clip_norm {
                let k = hyper.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = hyper.momentum * *v - lr * g;
                *p += *v;
            }
        }
        epoch_loss.push(total / samples.len() as f64);
    }

    let final_loss = mean_loss(&model, samples);
    if !final_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::numeric(format!(
            "training diverged: final loss {final_loss} (learning rate {} too high?)",
            hyper.lr
        )));
    }
    let report = TrainReport {
        initial_loss,
        epoch_loss,
        final_loss,
        samples: samples.len(),
        params: n_params,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Root-mean-square error in ms over all predicted percentiles.
pub fn evaluate_rmse(model: &CnnModel<f64>, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut ws = model.workspace();
    let mut sq = 0.0;
    let mut count = 0usize;
    for s in samples {
        model.forward_ws(&s.rh, &s.lh, &s.rc, &mut ws);
        let pred = model.denormalize(ws.raw_output());
        for (p, t) in pred.iter().zip(&s.percentiles) {
            sq += (p - t) * (p - t);
            count += 1;
        }
    }
    (sq / count as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn shape() -> InputShape {
        InputShape {
            n_tiers: 3,
            history: 2,
            channels: 5,
        }
    }

    fn synthetic(n: usize, seed: u64, target: impl Fn(&Sample) -> f64) -> Vec<Sample> {
        let s = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut v = |k: usize| (0..k).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
                let mut sample = Sample {
                    episode: 0,
                    interval: i as u32,
                    rh: v(s.rh_len()),
                    lh: v(s.lh_len()),
                    rc: v(s.rc_len()),
                    percentiles: [0.0; 5],
                    label: 0,
                };
                let y = target(&sample);
                sample.percentiles = [y, y + 1.0, y + 2.0, y + 3.0, y + 4.0];
                sample
            })
            .collect()
    }

    #[test]
    fn constant_target_is_learned() {
        let data = synthetic(200, 1, |_| 50.0);
        let hyper = TrainHyper {
            epochs: 40,
            clip_norm: 0.0,
            ..TrainHyper::default()
        };
        let (model, report) = cnn_train(&data, shape(), &hyper).unwrap();
        assert!(report.final_loss < 1e-3, "{report:?}");
        assert!(evaluate_rmse(&model, &data) < 0.05);
    }

    #[test]
    fn linear_teacher_on_one_config_entry() {
        let target = |s: &Sample| 100.0 + 80.0 * s.rc[2];
        let train = synthetic(1500, 2, target);
        let test = synthetic(300, 3, target);
        let hyper = TrainHyper {
            epochs: 30,
            seed: 4,
            ..TrainHyper::default()
        };
        let (model, report) = cnn_train(&train, shape(), &hyper).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let ys: Vec<f64> = test.iter().map(|s| s.percentiles[0]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
        let rmse = evaluate_rmse(&model, &test);
        assert!(rmse < 0.1 * std, "rmse {rmse} vs std {std}");
    }

    #[test]
    fn huge_learning_rate_aborts() {
        let data = synthetic(256, 5, |s| 10.0 * s.rc[0]);
        let hyper = TrainHyper {
            lr: 1e6,
            epochs: 3,
            clip_norm: 0.0,
            ..TrainHyper::default()
        };
        let err = cnn_train(&data, shape(), &hyper).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = synthetic(300, 6, |s| 20.0 * s.lh[3] + s.rh[7]);
        let hyper = TrainHyper {
            epochs: 2,
            seed: 9,
            ..TrainHyper::default()
        };
        let (a, ra) = cnn_train(&data, shape(), &hyper).unwrap();
        let (b, rb) = cnn_train(&data, shape(), &hyper).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra.epoch_loss, rb.epoch_loss);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            cnn_train(&[], shape(), &TrainHyper::default()),
            Err(Error::Input(_))
        ));
    }
}
