use serde::{Deserialize, Serialize};

use super::candidates::{
    projected_utilization, propose_candidates, upscale_hottest, utilization, Action, Candidate, CandidatePhase,
};
use super::predictor::{Estimate, Predictor};
use super::trust::{TrustMode, TrustState};
use super::SchedulerConfig;
use crate::error::Result;
use crate::graphsim::{Allocation, GraphSpec};
use crate::telemetry::TelemetryWindow;

/// Where the allocator is in its downscaling cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Removing cores one quantum at a time.
    Core,
    /// Cores settled; lowering frequencies.
    Freq,
    /// Both settled; waiting for a reduction to become feasible again.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinanState {
    pub phase: Phase,
    pub trust: TrustState,
    /// Consecutive intervals with a feasible downscale (conservative mode).
    pub streak: usize,
    /// Per tier, decisions since it was last upscaled (`None`: never).
    pub since_upscale: Vec<Option<usize>>,
}

impl SinanState {
    pub fn new(cfg: &SchedulerConfig) -> Self {
        SinanState {
            phase: Phase::Core,
            trust: TrustState::new(cfg.trust_window, cfg.trust_misses),
            streak: 0,
            since_upscale: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub alloc: Allocation,
    pub action: Action,
    /// Phase after this decision.
    pub phase: Phase,
    pub estimate: Estimate,
    /// Whether the chosen allocation met both feasibility tests.
    pub predicted_safe: bool,
    pub mode: TrustMode,
}

struct Scored {
    cand: Candidate,
    est: Estimate,
}

/// Fewest cores, then lowest predicted p99, then lowest tier index.
fn best_downscale<'a>(pool: impl Iterator<Item = &'a Scored>) -> Option<&'a Scored> {
    pool.min_by(|a, b| {
        a.cand
            .alloc
            .total_cores()
            .cmp(&b.cand.alloc.total_cores())
            .then(a.est.p99_ms.total_cmp(&b.est.p99_ms))
            .then(a.cand.action.tier().cmp(&b.cand.action.tier()))
    })
}

/// One decision of the model-driven allocator.
///
/// Candidates are feasible when the predicted p99 meets QoS and the
/// violation probability is within the mode's threshold. Core reductions
/// are tried before frequency reductions, and a reduction is skipped when
/// it would lift the tier's projected utilization above `cfg.util_guard`.
/// A tier upscaled within the last `cfg.upscale_cooldown` decisions is not
/// reduced. When the current allocation itself is infeasible the most
/// utilized tier is upscaled.
pub fn sinan_decide(
    window: &TelemetryWindow,
    spec: &GraphSpec,
    current: &Allocation,
    predictor: &mut dyn Predictor,
    cfg: &SchedulerConfig,
    state: &mut SinanState,
) -> Result<Decision> {
    state.since_upscale.resize(current.n_tiers(), None);
    for s in state.since_upscale.iter_mut().flatten() {
        *s += 1;
    }
    let mode = state.trust.mode;
    let pv_max = match mode {
        TrustMode::Normal => cfg.pv_threshold,
        TrustMode::Conservative => cfg.pv_threshold_conservative,
    };
    let feasible = |e: &Estimate| e.p99_ms <= cfg.latency_target * cfg.qos_ms && e.p_violation <= pv_max;

    let mut cands = propose_candidates(spec, current, CandidatePhase::Core, cfg.freq_step);
    if state.phase == Phase::Freq {
        cands.truncate(1); // hold only
    }
    if state.phase != Phase::Core {
        cands.extend(propose_candidates(spec, current, CandidatePhase::Freq, cfg.freq_step));
    }
    let allocs: Vec<Allocation> = cands.iter().map(|c| c.alloc.clone()).collect();
    let ests = predictor.estimate(window, spec, &allocs)?;
    let scored: Vec<Scored> = cands
        .into_iter()
        .zip(ests)
        .map(|(cand, est)| Scored { cand, est })
        .collect();
    let hold = &scored[0];

    let decide = |s: &Scored, phase: Phase| Decision {
        alloc: s.cand.alloc.clone(),
        action: s.cand.action,
        phase,
        estimate: s.est,
        predicted_safe: feasible(&s.est),
        mode,
    };

    let saturated = (0..current.n_tiers()).any(|t| utilization(window, t) > cfg.util_upscale);
    if !feasible(&hold.est) || saturated {
        state.streak = 0;
        let Some(up) = upscale_hottest(window, spec, current, cfg.freq_step, cfg.util_guard) else {
            state.phase = Phase::Hold;
            return Ok(decide(hold, Phase::Hold));
        };
        let est = predictor.estimate(window, spec, std::slice::from_ref(&up.alloc))?[0];
        if let Some(t) = up.action.tier() {
            state.since_upscale[t] = Some(0);
        }
        let best = Scored { cand: up, est };
        state.phase = Phase::Hold;
        return Ok(decide(&best, Phase::Hold));
    }

    let guarded = |s: &Scored| {
        s.cand.action.tier().is_none_or(|t| {
            state.since_upscale[t].is_none_or(|k| k >= cfg.upscale_cooldown)
                && projected_utilization(window, spec, current, &s.cand.alloc, t) <= cfg.util_guard
        })
    };
    let core_downs = || {
        scored
            .iter()
            .filter(|s| matches!(s.cand.action, Action::CoreDown(_)) && feasible(&s.est) && guarded(s))
    };
    let freq_downs = || {
        scored
            .iter()
            .filter(|s| matches!(s.cand.action, Action::FreqDown(_)) && feasible(&s.est) && guarded(s))
    };
    let (choice, next_phase) = match state.phase {
        Phase::Core => match best_downscale(core_downs()) {
            Some(s) => (Some(s), Phase::Core),
            None => (None, Phase::Freq),
        },
        Phase::Freq => match best_downscale(freq_downs()) {
            Some(s) => (Some(s), Phase::Freq),
            None => (None, Phase::Hold),
        },
        Phase::Hold => {
            if let Some(s) = best_downscale(core_downs()) {
                (Some(s), Phase::Core)
            } else if let Some(s) = best_downscale(freq_downs()) {
                (Some(s), Phase::Freq)
            } else {
                (None, Phase::Hold)
            }
        }
    };

    let Some(choice) = choice else {
        state.streak = 0;
        state.phase = next_phase;
        return Ok(decide(hold, next_phase));
    };
    if mode == TrustMode::Conservative {
        state.streak += 1;
        if state.streak < cfg.conservative_streak {
            return Ok(decide(hold, state.phase));
        }
    }
    state.streak = 0;
    state.phase = next_phase;
    Ok(decide(choice, next_phase))
}
