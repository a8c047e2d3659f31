use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graphsim::{Allocation, GraphSpec};
use crate::telemetry::TelemetryWindow;

/// Which neighbourhood of the current allocation to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidatePhase {
    Core,
    Freq,
    Upscale,
}

/// A single-tier move relative to the current allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Hold,
    CoreDown(usize),
    FreqDown(usize),
    CoreUp(usize),
    FreqUp(usize),
    /// One quantum moved from the first tier to the second.
    Move(usize, usize),
}

impl Action {
    pub fn is_downscale(&self) -> bool {
        matches!(self, Action::CoreDown(_) | Action::FreqDown(_))
    }

    pub fn is_upscale(&self) -> bool {
        matches!(self, Action::CoreUp(_) | Action::FreqUp(_) | Action::Move(..))
    }

    pub fn tier(&self) -> Option<usize> {
        match *self {
            Action::Hold => None,
            Action::CoreDown(t) | Action::FreqDown(t) | Action::CoreUp(t) | Action::FreqUp(t) | Action::Move(_, t) => {
                Some(t)
            }
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Hold => write!(f, "hold"),
            Action::CoreDown(t) => write!(f, "core-{t}"),
            Action::FreqDown(t) => write!(f, "freq-{t}"),
            Action::CoreUp(t) => write!(f, "core+{t}"),
            Action::FreqUp(t) => write!(f, "freq+{t}"),
            Action::Move(from, to) => write!(f, "move-{from}+{to}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub action: Action,
    pub alloc: Allocation,
}

/// Enumerates single-quantum, single-tier moves from `current`.
///
/// * `Core`: hold, then one quantum less on each tier still above one
///   quantum.
/// * `Freq`: one `freq_step` lower on each tier that has room.
/// * `Upscale`: one quantum more on each tier while the pool has room;
///   with the pool full, one `freq_step` higher instead.
pub fn propose_candidates(
    spec: &GraphSpec,
    current: &Allocation,
    phase: CandidatePhase,
    freq_step: usize,
) -> Vec<Candidate> {
    let q = spec.core_quantum;
    let top = spec.max_freq_idx();
    let pool_room = current.total_cores() + q <= spec.total_cores;
    let mut out = Vec::new();
    if phase == CandidatePhase::Core {
        out.push(Candidate {
            action: Action::Hold,
            alloc: current.clone(),
        });
    }
    for tier in 0..current.n_tiers() {
        let mut next = current.clone();
        let action = match phase {
            CandidatePhase::Core if current.cores[tier] >= 2 * q => {
                next.cores[tier] -= q;
                Action::CoreDown(tier)
            }
            CandidatePhase::Freq if current.freq_idx[tier] >= freq_step => {
                next.freq_idx[tier] -= freq_step;
                Action::FreqDown(tier)
            }
            CandidatePhase::Upscale if pool_room => {
                next.cores[tier] += q;
                Action::CoreUp(tier)
            }
            CandidatePhase::Upscale if current.freq_idx[tier] < top => {
                next.freq_idx[tier] = (current.freq_idx[tier] + freq_step).min(top);
                Action::FreqUp(tier)
            }
            _ => continue,
        };
        out.push(Candidate { action, alloc: next });
    }
    out
}

/// Latest CPU utilization of `tier`, 0 before any telemetry.
pub fn utilization(window: &TelemetryWindow, tier: usize) -> f64 {
    window.latest().map_or(0.0, |r| r.usage[tier][0])
}

/// Utilization `tier` would see if its capacity (cores times speed) went
/// from `current` to `next` under the same offered load.
pub fn projected_utilization(
    window: &TelemetryWindow,
    spec: &GraphSpec,
    current: &Allocation,
    next: &Allocation,
    tier: usize,
) -> f64 {
    let capacity = |a: &Allocation| f64::from(a.cores[tier]) * spec.speed(a.freq_idx[tier]);
    utilization(window, tier) * capacity(current) / capacity(next)
}

/// One quantum more on the most utilized tier (ties go to the longer
/// queue). With the pool full it gets one frequency step instead, and once
/// at full speed a quantum moved from the least utilized tier whose
/// projected utilization stays within `ceiling`. `None` when nothing is
/// possible.
pub fn upscale_hottest(
    window: &TelemetryWindow,
    spec: &GraphSpec,
    current: &Allocation,
    freq_step: usize,
    ceiling: f64,
) -> Option<Candidate> {
    let n = current.n_tiers();
    let mut order: Vec<usize> = (0..n).collect();
    let queue = |t: usize| window.latest().map_or(0.0, |r| r.usage[t][3]);
    order.sort_by(|&a, &b| {
        utilization(window, b)
            .total_cmp(&utilization(window, a))
            .then(queue(b).total_cmp(&queue(a)))
            .then(a.cmp(&b))
    });
    let q = spec.core_quantum;
    let top = spec.max_freq_idx();
    let hot = order[0];
    let mut next = current.clone();
    let action = if current.total_cores() + q <= spec.total_cores {
        next.cores[hot] += q;
        Action::CoreUp(hot)
    } else if current.freq_idx[hot] < top {
        next.freq_idx[hot] = (current.freq_idx[hot] + freq_step).min(top);
        Action::FreqUp(hot)
    } else {
        let c = |t: usize| f64::from(current.cores[t]);
        let cold = order.iter().rev().copied().find(|&t| {
            t != hot && current.cores[t] >= 2 * q && utilization(window, t) * c(t) / (c(t) - f64::from(q)) <= ceiling
        })?;
        next.cores[cold] -= q;
        next.cores[hot] += q;
        Action::Move(cold, hot)
    };
    Some(Candidate { action, alloc: next })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphsim::TierSpec;
    use crate::telemetry::{IntervalRecord, LatencyPercentiles};

    fn window_with(spec: &GraphSpec, utils: &[f64], queues: &[f64]) -> TelemetryWindow {
        let mut w = TelemetryWindow::new(spec, 2);
        w.push_record(IntervalRecord {
            usage: utils.iter().zip(queues).map(|(&u, &q)| [u, 1.0, u, q, 0.0]).collect(),
            percentiles: LatencyPercentiles([10.0; 5]),
            input_rate: 1.0,
            output_rate: 1.0,
        });
        w
    }

    fn three_tier(cores: u32) -> GraphSpec {
        GraphSpec {
            request_types: vec!["r".into()],
            tiers: vec![
                TierSpec::new("a", 100.0, 64).calls("b", "r"),
                TierSpec::new("b", 100.0, 64).calls("c", "r"),
                TierSpec::new("c", 100.0, 64),
            ],
            total_cores: cores,
            freq_levels: vec![0.5, 0.75, 1.0],
            freq_exponent: 1.0,
            core_quantum: 1,
        }
    }

    #[test]
    fn core_phase_is_reductions_plus_hold() {
        let spec = three_tier(12);
        let cur = Allocation::uniform(&spec, 3, 2);
        let c = propose_candidates(&spec, &cur, CandidatePhase::Core, 1);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0].action, Action::Hold);
        assert_eq!(c[2].alloc.cores, vec![3, 2, 3]);
    }

    #[test]
    fn single_core_tier_is_not_reduced() {
        let spec = three_tier(12);
        let cur = Allocation {
            cores: vec![1, 4, 4],
            freq_idx: vec![2; 3],
        };
        let c = propose_candidates(&spec, &cur, CandidatePhase::Core, 1);
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|k| k.action != Action::CoreDown(0)));
    }

    #[test]
    fn freq_phase_from_top_gives_one_per_tier() {
        let spec = three_tier(12);
        let cur = Allocation::uniform(&spec, 2, 2);
        let c = propose_candidates(&spec, &cur, CandidatePhase::Freq, 1);
        assert_eq!(c.len(), 3);
        for (tier, k) in c.iter().enumerate() {
            assert_eq!(k.action, Action::FreqDown(tier));
            assert_eq!(k.alloc.freq_idx[tier], 1);
        }
    }

    #[test]
    fn upscale_switches_to_frequency_when_pool_is_full() {
        let spec = three_tier(6);
        let cur = Allocation {
            cores: vec![2, 2, 2],
            freq_idx: vec![0, 2, 1],
        };
        let c = propose_candidates(&spec, &cur, CandidatePhase::Upscale, 1);
        let actions: Vec<Action> = c.iter().map(|k| k.action).collect();
        assert_eq!(actions, vec![Action::FreqUp(0), Action::FreqUp(2)]);
        let roomy = three_tier(7);
        let c = propose_candidates(&roomy, &cur, CandidatePhase::Upscale, 1);
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|k| k.alloc.total_cores() == 7));
    }

    #[test]
    fn candidates_are_always_valid() {
        let spec = three_tier(9);
        for cores in [[1, 1, 1], [1, 4, 4], [3, 3, 3], [7, 1, 1]] {
            for f in 0..3 {
                let cur = Allocation {
                    cores: cores.to_vec(),
                    freq_idx: vec![f; 3],
                };
                for phase in [CandidatePhase::Core, CandidatePhase::Freq, CandidatePhase::Upscale] {
                    for k in propose_candidates(&spec, &cur, phase, 1) {
                        assert!(k.alloc.is_valid(&spec), "{:?}", k);
                    }
                }
            }
        }
    }

    #[test]
    fn hottest_tier_gets_the_quantum() {
        let spec = three_tier(12);
        let cur = Allocation::uniform(&spec, 3, 2);
        let w = window_with(&spec, &[0.4, 0.9, 0.6], &[0.0; 3]);
        let c = upscale_hottest(&w, &spec, &cur, 1, 0.8).unwrap();
        assert_eq!(c.action, Action::CoreUp(1));
        assert_eq!(c.alloc.cores, vec![3, 4, 3]);
        let tied = window_with(&spec, &[0.9, 0.9, 0.6], &[1.0, 5.0, 0.0]);
        assert_eq!(
            upscale_hottest(&tied, &spec, &cur, 1, 0.8).unwrap().action,
            Action::CoreUp(1)
        );
    }

    #[test]
    fn full_pool_raises_frequency_then_steals_from_the_coldest() {
        let spec = three_tier(9);
        let slow = Allocation {
            cores: vec![3, 3, 3],
            freq_idx: vec![2, 1, 2],
        };
        let w = window_with(&spec, &[0.2, 0.9, 0.5], &[0.0; 3]);
        let c = upscale_hottest(&w, &spec, &slow, 1, 0.8).unwrap();
        assert_eq!(c.action, Action::FreqUp(1));
        assert_eq!(c.alloc.freq_idx, vec![2, 2, 2]);
        let fast = Allocation::uniform(&spec, 3, 2);
        let c = upscale_hottest(&w, &spec, &fast, 1, 0.8).unwrap();
        assert_eq!(c.action, Action::Move(0, 1));
        assert_eq!(c.alloc.cores, vec![2, 4, 3]);
        // Taking a core from tier 0 would lift it to 0.6 * 3/2 = 0.9.
        let warm = window_with(&spec, &[0.6, 0.9, 0.7], &[0.0; 3]);
        assert!(upscale_hottest(&warm, &spec, &fast, 1, 0.8).is_none());
    }

    #[test]
    fn projected_utilization_scales_with_capacity() {
        let spec = three_tier(12);
        let cur = Allocation::uniform(&spec, 4, 2);
        let w = window_with(&spec, &[0.5, 0.5, 0.5], &[0.0; 3]);
        let mut fewer = cur.clone();
        fewer.cores[0] = 2;
        assert!((projected_utilization(&w, &spec, &cur, &fewer, 0) - 1.0).abs() < 1e-12);
        let mut slower = cur.clone();
        slower.freq_idx[2] = 1;
        assert!((projected_utilization(&w, &spec, &cur, &slower, 2) - 0.5 / 0.75).abs() < 1e-12);
    }
}
