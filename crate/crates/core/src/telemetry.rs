//! Rolling per-tier usage and end-to-end latency history, and the fixed
//! normalization that turns it into model inputs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphsim::{Allocation, GraphSpec, IntervalStats};
use crate::mlcore::{InputShape, ModelInput};

/// p95..p99.
pub const N_PERCENTILES: usize = 5;
/// Tail percentiles tracked, in order.
pub const PERCENTILES: [u32; N_PERCENTILES] = [95, 96, 97, 98, 99];

/// Resource channels per tier, in tensor order.
pub const CHANNELS: [&str; 5] = ["cpu_util", "capacity", "offered_load", "queue_depth", "memory"];
pub const N_CHANNELS: usize = CHANNELS.len();

/// Default history length.
pub const DEFAULT_HISTORY: usize = 5;

/// Latencies above this saturate the normalized latency scale.
pub const LATENCY_CEILING_MS: f64 = 10_000.0;

/// End-to-end p95..p99 of one interval, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyPercentiles(pub [f64; N_PERCENTILES]);

impl LatencyPercentiles {
    pub fn p99(&self) -> f64 {
        self.0[N_PERCENTILES - 1]
    }

    pub fn as_array(&self) -> &[f64; N_PERCENTILES] {
        &self.0
    }

    pub fn is_monotone(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1]) && self.0[0] >= 0.0
    }
}

/// Nearest-rank tail percentiles (`rank = ceil(q * n)`); `None` for an
/// empty sample.
pub fn tail_percentiles(samples: &[f64]) -> Option<LatencyPercentiles> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = [0.0; N_PERCENTILES];
    for (slot, &p) in out.iter_mut().zip(&PERCENTILES) {
        // ceil(p * n / 100) in integers, at least rank 1
        let rank = ((p as usize * n).div_ceil(100)).max(1);
        *slot = sorted[rank - 1];
    }
    Some(LatencyPercentiles(out))
}

/// Carries the previous value forward across intervals with no
/// completions.
#[derive(Debug, Clone, Default)]
pub struct PercentileTracker {
    last: LatencyPercentiles,
}

impl PercentileTracker {
    /// Returns the interval's percentiles and whether they were carried
    /// forward from the previous interval.
    pub fn observe(&mut self, samples: &[f64]) -> (LatencyPercentiles, bool) {
        match tail_percentiles(samples) {
            Some(p) => {
                self.last = p;
                (p, false)
            }
            None => (self.last, true),
        }
    }
}

/// Fixed scale constants of the model inputs. Every map is monotone and
/// invertible on its range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub total_cores: f64,
    /// Per-tier queue capacity; depth maps to `ln(1+d)/ln(1+cap)`.
    pub queue_capacity: Vec<f64>,
    /// Per-tier upper bound of the memory proxy.
    pub mem_scale: Vec<f64>,
    pub latency_ceiling_ms: f64,
}

impl Normalizer {
    pub fn for_graph(spec: &GraphSpec) -> Self {
        Normalizer {
            total_cores: f64::from(spec.total_cores),
            queue_capacity: spec.tiers.iter().map(|t| t.queue_capacity as f64).collect(),
            mem_scale: spec.tiers.iter().map(|t| t.mem_scale()).collect(),
            latency_ceiling_ms: LATENCY_CEILING_MS,
        }
    }

    /// Raw channel value → [0, 1]. Capacity and offered load (both in
    /// full-speed cores) map to `ln(1+x)/ln(1+C)`, so their difference
    /// tracks the log of the load-to-capacity ratio.
    pub fn channel(&self, tier: usize, channel: usize, raw: f64) -> f64 {
        match channel {
            0 => raw,
            1 | 2 => ((1.0 + raw.max(0.0)).ln() / (1.0 + self.total_cores).ln()).min(1.0),
            3 => (1.0 + raw).ln() / (1.0 + self.queue_capacity[tier]).ln(),
            4 => raw / self.mem_scale[tier],
            _ => panic!("channel {channel} out of range"),
        }
    }

    pub fn channel_inverse(&self, tier: usize, channel: usize, x: f64) -> f64 {
        match channel {
            0 => x,
            1 | 2 => (x * (1.0 + self.total_cores).ln()).exp() - 1.0,
            3 => (x * (1.0 + self.queue_capacity[tier]).ln()).exp() - 1.0,
            4 => x * self.mem_scale[tier],
            _ => panic!("channel {channel} out of range"),
        }
    }

    pub fn latency(&self, ms: f64) -> f64 {
        ((1.0 + ms.max(0.0)).ln() / (1.0 + self.latency_ceiling_ms).ln()).min(1.0)
    }

    pub fn latency_inverse(&self, x: f64) -> f64 {
        (x * (1.0 + self.latency_ceiling_ms).ln()).exp() - 1.0
    }
}

/// One interval's raw telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    /// `[tier][channel]`, raw units.
    pub usage: Vec<[f64; N_CHANNELS]>,
    pub percentiles: LatencyPercentiles,
    pub input_rate: f64,
    pub output_rate: f64,
}

impl IntervalRecord {
    pub fn from_stats(stats: &IntervalStats, percentiles: LatencyPercentiles) -> Self {
        let usage = stats
            .tiers
            .iter()
            .map(|t| {
                [
                    t.cpu_utilization,
                    t.capacity_cores,
                    t.offered_cores,
                    t.queue_depth as f64,
                    t.memory_proxy,
                ]
            })
            .collect();
        IntervalRecord {
            usage,
            percentiles,
            input_rate: stats.input_rate(),
            output_rate: stats.output_rate(),
        }
    }
}

/// The last `history` intervals of telemetry, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryWindow {
    n_tiers: usize,
    history: usize,
    norm: Normalizer,
    rows: VecDeque<IntervalRecord>,
}

impl TelemetryWindow {
    pub fn new(spec: &GraphSpec, history: usize) -> Self {
        assert!(history >= 1, "history must hold at least one interval");
        TelemetryWindow {
            n_tiers: spec.n_tiers(),
            history,
            norm: Normalizer::for_graph(spec),
            rows: VecDeque::with_capacity(history + 1),
        }
    }

    pub fn n_tiers(&self) -> usize {
        self.n_tiers
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn shape(&self) -> InputShape {
        InputShape {
            n_tiers: self.n_tiers,
            history: self.history,
            channels: N_CHANNELS,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &IntervalRecord> {
        self.rows.iter()
    }

    pub fn latest(&self) -> Option<&IntervalRecord> {
        self.rows.back()
    }

    pub fn push_interval(&mut self, stats: &IntervalStats, percentiles: LatencyPercentiles) {
        self.push_record(IntervalRecord::from_stats(stats, percentiles));
    }

    pub fn push_record(&mut self, record: IntervalRecord) {
        debug_assert_eq!(record.usage.len(), self.n_tiers);
        self.rows.push_back(record);
        while self.rows.len() > self.history {
            self.rows.pop_front();
        }
    }

    /// Normalized `(X_RH, X_LH, X_RC)` for a candidate allocation. Missing
    /// history rows (cold start) are zeros at the oldest positions.
    pub fn make_inputs(&self, spec: &GraphSpec, candidate: &Allocation) -> Result<ModelInput<f64>> {
        if candidate.n_tiers() != self.n_tiers || spec.n_tiers() != self.n_tiers {
            return Err(Error::config(format!(
                "window tracks {} tiers, candidate has {}, graph has {}",
                self.n_tiers,
                candidate.n_tiers(),
                spec.n_tiers()
            )));
        }
        let (n, t_len) = (self.n_tiers, self.history);
        let pad = t_len - self.rows.len();
        let mut rh = vec![0.0; n * t_len * N_CHANNELS];
        let mut lh = vec![0.0; t_len * N_PERCENTILES];
        for (k, row) in self.rows.iter().enumerate() {
            let t = pad + k;
            for (tier, usage) in row.usage.iter().enumerate() {
                for (c, &raw) in usage.iter().enumerate() {
                    rh[(tier * t_len + t) * N_CHANNELS + c] = self.norm.channel(tier, c, raw);
                }
            }
            for (p, &ms) in row.percentiles.0.iter().enumerate() {
                lh[t * N_PERCENTILES + p] = self.norm.latency(ms);
            }
        }
        let rc = candidate
            .cores
            .iter()
            .zip(&candidate.freq_idx)
            .flat_map(|(&c, &f)| [f64::from(c) / self.norm.total_cores, spec.rel_freq(f)])
            .collect();
        Ok(ModelInput {
            shape: self.shape(),
            rh,
            lh,
            rc,
        })
    }
}
