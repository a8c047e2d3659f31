use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::telemetry::LatencyPercentiles;

/// Per-tier observations over one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    /// Fraction of allocated core-time spent serving (blocked time excluded).
    pub cpu_utilization: f64,
    /// Waiting requests at the end of the interval.
    pub queue_depth: usize,
    /// Working-set stand-in; grows with the interval's peak queue depth.
    pub memory_proxy: f64,
    /// Mean time requests leaving this tier spent in it, blocked time
    /// included (ms, 0 when none left).
    pub residence_ms: f64,
    pub cores: u32,
    pub rel_freq: f64,
    /// Allocated cores times their speed factor.
    pub capacity_cores: f64,
    /// Work admitted over the interval in full-speed cores (mean service
    /// demand per second).
    pub offered_cores: f64,
}

/// Everything observed over one simulated interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub start: f64,
    pub duration: f64,
    pub tiers: Vec<TierStats>,
    /// End-to-end latencies (ms) of requests that finished this interval.
    pub latency_samples: Vec<f64>,
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
    /// Requests inside the system when the interval ended.
    pub in_flight: u64,
}

impl IntervalStats {
    /// Input throughput, requests/s.
    pub fn input_rate(&self) -> f64 {
        self.arrivals as f64 / self.duration
    }

    /// Output throughput, requests/s.
    pub fn output_rate(&self) -> f64 {
        self.completions as f64 / self.duration
    }
}

/// Streams interval statistics as tidy CSV: one `tier` row per
/// (interval, tier) and one `e2e` row per interval.
pub struct StatsCsvWriter<W: Write> {
    out: csv::Writer<W>,
    tier_names: Vec<String>,
}

impl<W: Write> StatsCsvWriter<W> {
    pub fn new(out: W, tier_names: Vec<String>) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record([
            "interval",
            "scope",
            "tier",
            "cpu_util",
            "queue_depth",
            "memory",
            "residence_ms",
            "cores",
            "rel_freq",
            "p95",
            "p96",
            "p97",
            "p98",
            "p99",
            "arrivals",
            "completions",
            "drops",
        ])?;
        Ok(StatsCsvWriter { out, tier_names })
    }

    pub fn write(&mut self, interval: usize, stats: &IntervalStats, pct: &LatencyPercentiles) -> Result<()> {
        let idx = interval.to_string();
        for (name, t) in self.tier_names.iter().zip(&stats.tiers) {
            self.out.write_record([
                idx.as_str(),
                "tier",
                name,
                &format!("{:.6}", t.cpu_utilization),
                &t.queue_depth.to_string(),
                &format!("{:.6}", t.memory_proxy),
                &format!("{:.3}", t.residence_ms),
                &t.cores.to_string(),
                &format!("{:.4}", t.rel_freq),
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
            ])?;
        }
        let v = pct.as_array();
        self.out.write_record([
            idx.as_str(),
            "e2e",
            "",
            "",
            "",
            "",
            "",
            "",
            "",
            &format!("{:.3}", v[0]),
            &format!("{:.3}", v[1]),
            &format!("{:.3}", v[2]),
            &format!("{:.3}", v[3]),
            &format!("{:.3}", v[4]),
            &stats.arrivals.to_string(),
            &stats.completions.to_string(),
            &stats.drops.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| crate::Error::io("<stats csv>", e))
    }
}
