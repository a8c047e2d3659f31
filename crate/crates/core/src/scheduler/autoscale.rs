use serde::{Deserialize, Serialize};

use crate::graphsim::{Allocation, GraphSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoscalePolicy {
    /// Resource-optimized thresholds.
    Opt,
    /// QoS-conservative thresholds.
    Cons,
}

/// Utilization thresholds of a threshold autoscaler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Below this, remove one core quantum.
    pub core_down: f64,
    /// Below this, lower frequency one step.
    pub freq_down: f64,
    /// Above this, add one core quantum.
    pub up: f64,
}

impl AutoscalePolicy {
    pub fn thresholds(self) -> Thresholds {
        match self {
            AutoscalePolicy::Opt => Thresholds {
                core_down: 0.30,
                freq_down: 0.40,
                up: 0.70,
            },
            AutoscalePolicy::Cons => Thresholds {
                core_down: 0.20,
                freq_down: 0.30,
                up: 0.50,
            },
        }
    }
}

/// Per-tier threshold rules. Reductions are applied first; upscales then
/// take pool capacity in order of decreasing utilization, and an upscaled
/// tier returns to top frequency (even when the pool is full).
pub fn autoscale(policy: AutoscalePolicy, spec: &GraphSpec, utilization: &[f64], current: &Allocation) -> Allocation {
    let th = policy.thresholds();
    let q = spec.core_quantum;
    let mut next = current.clone();
    let mut hot = Vec::new();
    for (tier, &u) in utilization.iter().enumerate() {
        if u < th.core_down && next.cores[tier] >= 2 * q {
            next.cores[tier] -= q;
        }
        if u < th.freq_down && next.freq_idx[tier] > 0 {
            next.freq_idx[tier] -= 1;
        }
        if u > th.up {
            hot.push(tier);
        }
    }
    hot.sort_by(|&a, &b| utilization[b].total_cmp(&utilization[a]).then(a.cmp(&b)));
    for tier in hot {
        if next.total_cores() + q <= spec.total_cores {
            next.cores[tier] += q;
        }
        next.freq_idx[tier] = spec.max_freq_idx();
    }
    next
}
