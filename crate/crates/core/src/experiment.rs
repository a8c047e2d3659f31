//! Closed-loop runs: a policy allocates resources every interval while the
//! simulator serves a load trace, and the outcome is summarized.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datacollect::{explore_action, CollectorConfig, ARRIVAL_SEED_OFFSET, INTERVAL};
use crate::error::{Error, Result};
use crate::graphsim::{build_cluster, Allocation, GraphSpec, StallFault};
use crate::mlcore::{HybridModel, ModelInput};
use crate::scheduler::DecisionRecord;
use crate::scheduler::{
    autoscale, sinan_decide, update_trust, AutoscalePolicy, OraclePredictor, SchedulerConfig, SinanState, TrustMode,
};
use crate::telemetry::{PercentileTracker, TelemetryWindow, DEFAULT_HISTORY};
use crate::workload::{ArrivalStream, LoadTrace};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Sinan,
    AsOpt,
    AsCons,
    Oracle,
    Collector,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Sinan => "sinan",
            PolicyKind::AsOpt => "as_opt",
            PolicyKind::AsCons => "as_cons",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Collector => "collector",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sinan" => PolicyKind::Sinan,
            "as_opt" => PolicyKind::AsOpt,
            "as_cons" => PolicyKind::AsCons,
            "oracle" => PolicyKind::Oracle,
            "collector" => PolicyKind::Collector,
            other => return Err(Error::config(format!("unknown policy {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheduler: SchedulerConfig,
    pub history: usize,
    pub seed: u64,
    pub fault: Option<StallFault>,
    /// Intervals the oracle simulates ahead per candidate.
    pub oracle_lookahead: usize,
    /// Intervals at the start during which the initial allocation is held.
    pub warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scheduler: SchedulerConfig::default(),
            history: DEFAULT_HISTORY,
            seed: 0,
            fault: None,
            oracle_lookahead: 3,
            warmup: DEFAULT_HISTORY,
        }
    }
}

/// Run summary; every field is a pure function of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub policy: String,
    pub seed: u64,
    pub intervals: usize,
    pub qos_ms: f64,
    pub violation_intervals: usize,
    pub violation_rate: f64,
    /// Maximal runs of consecutive violating intervals.
    pub violation_episodes: usize,
    pub max_p99_ms: f64,
    pub mean_active_cores: f64,
    pub core_seconds: f64,
    /// Core-weighted mean relative frequency.
    pub mean_rel_freq: f64,
    /// Σ cores × relative frequency × interval.
    pub freq_seconds: f64,
    pub p99_series: Vec<f64>,
}

impl Summary {
    pub fn from_log(policy: &str, seed: u64, spec: &GraphSpec, qos_ms: f64, log: &[DecisionRecord]) -> Self {
        let n = log.len();
        let violating: Vec<bool> = log.iter().map(|r| r.realized_p99 > qos_ms).collect();
        let violation_intervals = violating.iter().filter(|&&v| v).count();
        let violation_episodes = violating
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v && (i == 0 || !violating[i - 1]))
            .count();
        let core_seconds: f64 = log.iter().map(|r| f64::from(r.total_cores()) * INTERVAL).sum();
        let freq_seconds: f64 = log
            .iter()
            .map(|r| {
                r.cores
                    .iter()
                    .zip(&r.freq_idx)
                    .map(|(&c, &f)| f64::from(c) * spec.rel_freq(f))
                    .sum::<f64>()
                    * INTERVAL
            })
            .sum();
        let denom = n.max(1) as f64;
        Summary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            policy: policy.to_string(),
            seed,
            intervals: n,
            qos_ms,
            violation_intervals,
            violation_rate: violation_intervals as f64 / denom,
            violation_episodes,
            max_p99_ms: log.iter().map(|r| r.realized_p99).fold(0.0, f64::max),
            mean_active_cores: core_seconds / (INTERVAL * denom),
            core_seconds,
            mean_rel_freq: if core_seconds > 0.0 {
                freq_seconds / core_seconds
            } else {
                0.0
            },
            freq_seconds,
            p99_series: log.iter().map(|r| r.realized_p99).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: Vec<DecisionRecord>,
    pub summary: Summary,
    /// Model inputs captured at the requested intervals (window before the
    /// interval, allocation applied during it).
    pub captured: Vec<(usize, ModelInput<f64>)>,
    /// Wall-clock seconds per decision.
    pub decision_seconds: Vec<f64>,
}

#[allow(clippy::large_enum_variant)]
enum Controller {
    Model(HybridModel, SinanState),
    Oracle(OraclePredictor, SinanState),
    Autoscale(AutoscalePolicy),
    Collector(CollectorConfig, ChaCha8Rng),
}

/// Runs `policy` over every second of `trace`.
pub fn run_closed_loop(
    spec: &GraphSpec,
    trace: &LoadTrace,
    policy: PolicyKind,
    model: Option<&HybridModel>,
    cfg: &RunConfig,
    capture: &[usize],
) -> Result<RunResult> {
    cfg.scheduler.validate()?;
    let topo = spec.validate()?;
    let sched = &cfg.scheduler;
    let mut controller = match policy {
        PolicyKind::Sinan => {
            let m = model.ok_or_else(|| Error::config("policy sinan needs a model"))?;
            let shape = TelemetryWindow::new(spec, cfg.history).shape();
            m.shape().check(&shape)?;
            Controller::Model(m.clone(), SinanState::new(sched))
        }
        PolicyKind::Oracle => Controller::Oracle(
            OraclePredictor::new(sched.qos_ms, INTERVAL, cfg.oracle_lookahead),
            SinanState::new(sched),
        ),
        PolicyKind::AsOpt => Controller::Autoscale(AutoscalePolicy::Opt),
        PolicyKind::AsCons => Controller::Autoscale(AutoscalePolicy::Cons),
        PolicyKind::Collector => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            let c = CollectorConfig {
                qos_ms: sched.qos_ms,
                alpha_ms: 0.2 * sched.qos_ms,
                history: cfg.history,
                ..CollectorConfig::default()
            };
            Controller::Collector(c, rng)
        }
    };

    let mut cluster = build_cluster(spec, cfg.seed)?;
    if let Some(f) = &cfg.fault {
        cluster.inject_stall(f)?;
    }
    let arrivals = ArrivalStream::new(trace.clone(), cfg.seed.wrapping_add(ARRIVAL_SEED_OFFSET));
    let mut window = TelemetryWindow::new(spec, cfg.history);
    let mut tracker = PercentileTracker::default();
    let demand = spec.demand_per_request(&topo, &trace.mix);
    let mut alloc = Allocation::proportional(spec, &demand);
    let mut last_p99 = 0.0;
    let mut log = Vec::with_capacity(trace.seconds());
    let mut captured = Vec::new();
    let mut decision_seconds = Vec::new();

    for t in 0..trace.seconds() {
        let mut predicted = None;
        let mut action = String::from("hold");
        let mut safe = None;
        if t >= cfg.warmup {
            let started = Instant::now();
            match &mut controller {
                Controller::Model(model, state) => {
                    let d = sinan_decide(&window, spec, &alloc, model, sched, state)?;
                    predicted = Some((d.estimate.p99_ms, d.estimate.p_violation));
                    action = d.action.to_string();
                    safe = Some(d.predicted_safe);
                    alloc = d.alloc;
                }
                Controller::Oracle(oracle, state) => {
                    let ahead: Vec<_> = (t..(t + cfg.oracle_lookahead).min(trace.seconds()))
                        .map(|s| arrivals.arrivals(s))
                        .collect();
                    oracle.observe(&cluster, ahead);
                    let d = sinan_decide(&window, spec, &alloc, oracle, sched, state)?;
                    predicted = Some((d.estimate.p99_ms, d.estimate.p_violation));
                    action = d.action.to_string();
                    safe = Some(d.predicted_safe);
                    alloc = d.alloc;
                }
                Controller::Autoscale(p) => {
                    let util: Vec<f64> = (0..spec.n_tiers())
                        .map(|k| window.latest().map_or(0.0, |r| r.usage[k][0]))
                        .collect();
                    alloc = autoscale(*p, spec, &util, &alloc);
                }
                Controller::Collector(c, rng) => {
                    alloc = explore_action(&window, spec, &alloc, last_p99, c, rng);
                }
            }
            decision_seconds.push(started.elapsed().as_secs_f64());
        }
        if capture.contains(&t) {
            captured.push((t, window.make_inputs(spec, &alloc)?));
        }
        let stats = cluster.simulate_interval(&alloc, &arrivals.arrivals(t), INTERVAL)?;
        let (pct, _) = tracker.observe(&stats.latency_samples);
        window.push_interval(&stats, pct);
        last_p99 = pct.p99();
        let mut mode = "normal";
        if let Controller::Model(_, state) | Controller::Oracle(_, state) = &mut controller {
            if let Some(s) = safe {
                update_trust(&mut state.trust, s, last_p99 > sched.qos_ms);
            }
            if state.trust.mode == TrustMode::Conservative {
                mode = "conservative";
            }
        }
        log.push(DecisionRecord {
            interval: t,
            cores: alloc.cores.clone(),
            freq_idx: alloc.freq_idx.clone(),
            predicted_p99: predicted.map(|p| p.0),
            p_violation: predicted.map(|p| p.1),
            realized_p99: last_p99,
            trust_mode: mode.to_string(),
            action,
        });
    }
    let summary = Summary::from_log(policy.name(), cfg.seed, spec, sched.qos_ms, &log);
    Ok(RunResult {
        log,
        summary,
        captured,
        decision_seconds,
    })
}

/// One row of a policy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub violation_rate: f64,
    pub core_seconds: f64,
    pub freq_seconds: f64,
    /// Core-seconds relative to the reference row.
    pub core_ratio: f64,
    pub freq_ratio: f64,
}

/// Compares summaries against `reference` (by index).
pub fn compare(summaries: &[Summary], reference: usize) -> Result<Vec<ComparisonRow>> {
    let base = summaries
        .get(reference)
        .ok_or_else(|| Error::input("reference run index out of range"))?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    Ok(summaries
        .iter()
        .map(|s| ComparisonRow {
            policy: s.policy.clone(),
            violation_rate: s.violation_rate,
            core_seconds: s.core_seconds,
            freq_seconds: s.freq_seconds,
            core_ratio: ratio(s.core_seconds, base.core_seconds),
            freq_ratio: ratio(s.freq_seconds, base.freq_seconds),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::constant_trace;

    #[test]
    fn summary_matches_log_averages() {
        let spec = GraphSpec::social_network();
        let trace = constant_trace(0.3, 2000.0, 30.0).unwrap();
        let r = run_closed_loop(&spec, &trace, PolicyKind::AsOpt, None, &RunConfig::default(), &[12]).unwrap();
        assert_eq!(r.log.len(), 30);
        let mean = r.log.iter().map(|x| f64::from(x.total_cores())).sum::<f64>() / 30.0;
        assert!((r.summary.mean_active_cores - mean).abs() < 1e-9);
        assert_eq!(r.captured.len(), 1);
        assert!(r.log.iter().all(|x| x.cores.iter().sum::<u32>() <= 150));
    }

    #[test]
    fn sinan_without_a_model_is_a_config_error() {
        let spec = GraphSpec::social_network();
        let trace = constant_trace(0.3, 2000.0, 5.0).unwrap();
        let err = run_closed_loop(&spec, &trace, PolicyKind::Sinan, None, &RunConfig::default(), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identical_runs_compare_to_one() {
        let spec = GraphSpec::social_network();
        let trace = constant_trace(0.2, 2000.0, 10.0).unwrap();
        let a = run_closed_loop(&spec, &trace, PolicyKind::AsCons, None, &RunConfig::default(), &[]).unwrap();
        let rows = compare(&[a.summary.clone(), a.summary], 0).unwrap();
        assert_eq!(rows[1].core_ratio, 1.0);
        assert_eq!(rows[1].freq_ratio, 1.0);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [
            PolicyKind::Sinan,
            PolicyKind::AsOpt,
            PolicyKind::AsCons,
            PolicyKind::Oracle,
            PolicyKind::Collector,
        ] {
            assert_eq!(PolicyKind::parse(p.name()).unwrap(), p);
        }
        assert!(PolicyKind::parse("nope").is_err());
    }
}
