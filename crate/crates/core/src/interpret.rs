//! Local surrogate explanations: perturb the resource-usage history of one
//! snapshot, label the perturbations with the model's predicted p99, fit a
//! linear model to the deltas, and rank (tier, channel) pairs by the summed
//! magnitude of their coefficients.
//!
//! Noise on each (tier, channel) is `sigma` times that channel's scale, and
//! the surrogate is fit on deltas divided by the scale, so a weight is the
//! predicted p99 change for a one-scale move. Scales are usually the
//! per-channel spread of the training data ([`channel_scales`]).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlcore::{least_squares, r_squared, HybridModel, InputShape, ModelInput, Sample};
use crate::telemetry::CHANNELS;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Surrogate fits below this R² are reported with a warning.
pub const MIN_TRUSTED_R2: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimeConfig {
    /// Perturbations used for the fit.
    pub samples: usize,
    /// Noise std in units of the channel scale.
    pub sigma: f64,
    /// Extra perturbations held out to score the surrogate, as a fraction
    /// of `samples`.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            samples: 500,
            sigma: 0.1,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub tier: usize,
    pub tier_name: String,
    pub channel: usize,
    pub channel_name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub schema_version: u32,
    /// Sorted by `|weight|`, largest first.
    pub entries: Vec<Importance>,
    /// In-sample R² of the surrogate; `None` when the labels do not vary.
    pub r2: Option<f64>,
    /// R² on the held-out perturbations.
    pub holdout_r2: Option<f64>,
    pub samples: usize,
    pub sigma: f64,
    pub seed: u64,
    /// True when the normal equations needed the ridge fallback.
    pub ridge: bool,
    pub warning: Option<String>,
}

impl ImportanceReport {
    /// Tiers in order of their first appearance in the ranking.
    pub fn tier_order(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.tier) {
                seen.push(e.tier);
            }
        }
        seen
    }

    /// 1-based rank of `tier` by its best (tier, channel) entry.
    pub fn tier_rank(&self, tier: usize) -> Option<usize> {
        self.tier_order().iter().position(|&t| t == tier).map(|p| p + 1)
    }

    pub fn top_tier(&self) -> Option<&str> {
        self.entries.first().map(|e| e.tier_name.as_str())
    }

    pub fn is_trusted(&self) -> bool {
        self.r2.is_some_and(|r| r >= MIN_TRUSTED_R2)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_table<W: Write>(&self, mut out: W, top: usize) -> Result<()> {
        let io = |e| Error::io("<importance table>", e);
        writeln!(out, "{:>4}  {:<16} {:<12} {:>12}", "rank", "tier", "channel", "weight").map_err(io)?;
        for (i, e) in self.entries.iter().take(top).enumerate() {
            writeln!(
                out,
                "{:>4}  {:<16} {:<12} {:>12.4}",
                i + 1,
                e.tier_name,
                e.channel_name,
                e.weight
            )
            .map_err(io)?;
        }
        let fmt = |r: Option<f64>| r.map_or("undefined".to_string(), |v| format!("{v:.3}"));
        writeln!(
            out,
            "r2 {}  holdout r2 {}  samples {}",
            fmt(self.r2),
            fmt(self.holdout_r2),
            self.samples
        )
        .map_err(io)?;
        if let Some(w) = &self.warning {
            writeln!(out, "warning: {w}").map_err(io)?;
        }
        Ok(())
    }
}

/// Smallest channel scale; keeps constant channels perturbable.
pub const MIN_SCALE: f64 = 1e-3;

/// Standard deviation of every (tier, channel) of `X_RH` over `samples`,
/// pooled over timestamps and floored at [`MIN_SCALE`]. Indexed
/// `tier * channels + channel`.
pub fn channel_scales(samples: &[Sample], shape: InputShape) -> Vec<f64> {
    let (n, t_len, ch) = (shape.n_tiers, shape.history, shape.channels);
    let mut sum = vec![0.0; n * ch];
    let mut sq = vec![0.0; n * ch];
    let mut count = 0.0;
    for s in samples {
        for tier in 0..n {
            for t in 0..t_len {
                for c in 0..ch {
                    let v = s.rh[(tier * t_len + t) * ch + c];
                    sum[tier * ch + c] += v;
                    sq[tier * ch + c] += v * v;
                }
            }
        }
        count += t_len as f64;
    }
    sum.iter()
        .zip(&sq)
        .map(|(&a, &b)| {
            if count == 0.0 {
                return 1.0;
            }
            let mean = a / count;
            (b / count - mean * mean).max(0.0).sqrt().max(MIN_SCALE)
        })
        .collect()
}

fn scale_of(shape: InputShape, scales: Option<&[f64]>) -> Result<Vec<f64>> {
    let len = shape.n_tiers * shape.channels;
    match scales {
        None => Ok(vec![1.0; len]),
        Some(s) if s.len() != len => Err(Error::config(format!("{} channel scales for {len} channels", s.len()))),
        Some(s) if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
            Err(Error::input("channel scales must be positive and finite"))
        }
        Some(s) => Ok(s.to_vec()),
    }
}

/// `n` copies of `x` with independent Gaussian noise of std
/// `sigma * scale[tier * channels + channel]` on every `X_RH` entry,
/// clipped to [0, 1]. `X_LH` and `X_RC` are unchanged. `None` scales are 1.
pub fn perturb<R: Rng + ?Sized>(
    x: &ModelInput<f64>,
    n: usize,
    sigma: f64,
    scales: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<ModelInput<f64>>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::input(format!(
            "perturbation sigma must be positive, got {sigma}"
        )));
    }
    x.check()?;
    let scale = scale_of(x.shape, scales)?;
    let (t_len, ch) = (x.shape.history, x.shape.channels);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::input(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let mut p = x.clone();
            for (i, v) in p.rh.iter_mut().enumerate() {
                let k = (i / (t_len * ch)) * ch + i % ch;
                *v = (*v + scale[k] * noise.sample(rng)).clamp(0.0, 1.0);
            }
            p
        })
        .collect())
}

/// Ranks (tier, channel) pairs of `x` by their local influence on the p99
/// returned by `predict`. `scales` as in [`perturb`].
pub fn rank_features<F>(
    mut predict: F,
    x: &ModelInput<f64>,
    cfg: &LimeConfig,
    scales: Option<&[f64]>,
    tier_names: &[String],
) -> Result<ImportanceReport>
where
    F: FnMut(&ModelInput<f64>) -> Result<f64>,
{
    let shape = x.shape;
    if tier_names.len() != shape.n_tiers {
        return Err(Error::config(format!(
            "{} tier names for {} tiers",
            tier_names.len(),
            shape.n_tiers
        )));
    }
    if cfg.samples < 2 {
        return Err(Error::input("at least two perturbations are needed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let holdout = (cfg.samples as f64 * cfg.holdout_fraction.max(0.0)).round() as usize;
    let perturbed = perturb(x, cfg.samples + holdout, cfg.sigma, scales, &mut rng)?;
    let scale = scale_of(shape, scales)?;
    let (t_len, ch) = (shape.history, shape.channels);

    let base = predict(x)?;
    let mut feats = Vec::with_capacity(perturbed.len());
    let mut labels = Vec::with_capacity(perturbed.len());
    for p in &perturbed {
        let y = predict(p)?;
        if !y.is_finite() {
            return Err(Error::numeric("model returned a non-finite prediction"));
        }
        feats.push(
            p.rh.iter()
                .zip(&x.rh)
                .enumerate()
                .map(|(i, (a, b))| (a - b) / scale[(i / (t_len * ch)) * ch + i % ch])
                .collect::<Vec<f64>>(),
        );
        labels.push(vec![y - base]);
    }
    let (fx, hx) = feats.split_at(cfg.samples);
    let (fy, hy) = labels.split_at(cfg.samples);
    let fit = least_squares(fx, fy)?;
    let r2 = Some(fit.r2[0]).filter(|r| r.is_finite());
    let holdout_r2 = if hx.len() >= 2 {
        Some(r_squared(&fit, hx, hy)[0]).filter(|r| r.is_finite())
    } else {
        None
    };

    let mut entries = Vec::with_capacity(shape.n_tiers * ch);
    for (tier, tier_name) in tier_names.iter().enumerate() {
        for c in 0..ch {
            let weight = (0..t_len).map(|t| fit.coef[0][(tier * t_len + t) * ch + c].abs()).sum();
            entries.push(Importance {
                tier,
                tier_name: tier_name.clone(),
                channel: c,
                channel_name: CHANNELS.get(c).map_or_else(|| format!("ch{c}"), |s| s.to_string()),
                weight,
            });
        }
    }
    entries.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then(a.tier.cmp(&b.tier))
            .then(a.channel.cmp(&b.channel))
    });

    let warning = match r2 {
        None => Some("surrogate R² undefined: predictions do not vary under perturbation".to_string()),
        Some(r) if r < MIN_TRUSTED_R2 => Some(format!("surrogate R² {r:.3} is below {MIN_TRUSTED_R2}")),
        _ => None,
    };
    Ok(ImportanceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        entries,
        r2,
        holdout_r2,
        samples: cfg.samples,
        sigma: cfg.sigma,
        seed: cfg.seed,
        ridge: fit.ridge,
        warning,
    })
}

/// `rank_features` with the hybrid model's p99 output as the label.
pub fn explain_model(
    model: &HybridModel,
    x: &ModelInput<f64>,
    cfg: &LimeConfig,
    scales: Option<&[f64]>,
    tier_names: &[String],
) -> Result<ImportanceReport> {
    model.shape().check(&x.shape)?;
    let mut ws = model.cnn.workspace();
    rank_features(|p| Ok(model.predict_fast(p, &mut ws)?.0), x, cfg, scales, tier_names)
}
