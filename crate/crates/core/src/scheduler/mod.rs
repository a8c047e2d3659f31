//! The per-interval control loop: the model-driven two-phase allocator
//! with its trust fallback, and the utilization-threshold autoscalers it is
//! compared against.

mod autoscale;
mod candidates;
mod log;
mod predictor;
mod sinan;
mod trust;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use autoscale::{autoscale, AutoscalePolicy, Thresholds};
pub use candidates::{
    projected_utilization, propose_candidates, upscale_hottest, utilization, Action, Candidate, CandidatePhase,
};
pub use log::{DecisionLogWriter, DecisionRecord};
pub use predictor::{Estimate, OraclePredictor, Predictor};
pub use sinan::{sinan_decide, Decision, Phase, SinanState};
pub use trust::{update_trust, TrustMode, TrustState};

/// Knobs of the model-driven scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// p99 target per interval, ms. The default 500 ms is an arbitrary
    /// choice for the simulated service.
    pub qos_ms: f64,
    /// Decision interval, s.
    pub interval: f64,
    /// Highest acceptable violation probability in normal mode.
    pub pv_threshold: f64,
    /// Same, in conservative mode.
    pub pv_threshold_conservative: f64,
    /// Consecutive feasible predictions required to downscale in
    /// conservative mode.
    pub conservative_streak: usize,
    pub freq_step: usize,
    /// Trust window `W_t`, intervals.
    pub trust_window: usize,
    /// Misses tolerated in the window (`M`).
    pub trust_misses: usize,
    /// Reductions that would push the tier's projected CPU utilization
    /// above this are never taken.
    pub util_guard: f64,
    /// Candidates must be predicted at or below this fraction of QoS.
    pub latency_target: f64,
    /// Intervals after an upscale during which that tier is not reduced.
    pub upscale_cooldown: usize,
    /// A tier busier than this is upscaled even when the model deems the
    /// current allocation feasible.
    pub util_upscale: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            qos_ms: 500.0,
            interval: 1.0,
            pv_threshold: 0.5,
            pv_threshold_conservative: 0.2,
            conservative_streak: 3,
            freq_step: 1,
            trust_window: 100,
            trust_misses: 3,
            util_guard: 0.7,
            latency_target: 1.0,
            upscale_cooldown: 10,
            util_upscale: 0.9,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| p > 0.0 && p < 1.0;
        if !(self.qos_ms > 0.0) || !(self.interval > 0.0) {
            return Err(Error::config("qos_ms and interval must be positive"));
        }
        if !unit(self.pv_threshold) || !unit(self.pv_threshold_conservative) {
            return Err(Error::config("violation-probability thresholds must lie in (0, 1)"));
        }
        if !(self.util_guard > 0.0) || !(self.latency_target > 0.0 && self.latency_target <= 1.0) {
            return Err(Error::config(
                "util_guard must be positive and latency_target in (0, 1]",
            ));
        }
        if self.freq_step == 0 || self.trust_window == 0 {
            return Err(Error::config("freq_step and trust_window must be at least 1"));
        }
        Ok(())
    }
}
