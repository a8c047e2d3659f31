//! Exploration agent that drives the simulator to build a training set
//! while keeping tail latency inside `[0, QoS + α]`.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphsim::{build_cluster, Allocation, GraphSpec, StallFault};
use crate::mlcore::{Dataset, DatasetHeader, Sample, DATASET_SCHEMA_VERSION};
use crate::scheduler::{autoscale, projected_utilization, upscale_hottest, utilization, AutoscalePolicy};
use crate::telemetry::{PercentileTracker, TelemetryWindow, DEFAULT_HISTORY, N_CHANNELS};
use crate::workload::{constant_trace, diurnal_trace, ArrivalStream, LoadTrace};

/// Seconds per decision interval; arrivals are generated per second.
pub const INTERVAL: f64 = 1.0;

/// Offset separating the arrival stream seed from the cluster seed.
pub(crate) const ARRIVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CollectorMode {
    /// Region-bounded exploration.
    Explore,
    /// Uniform single-tier moves regardless of latency.
    Random,
    /// Allocation driven by a threshold autoscaler.
    Autoscaler(AutoscalePolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    pub qos_ms: f64,
    /// Exploration slack above QoS, ms.
    pub alpha_ms: f64,
    pub freq_step: usize,
    /// Intervals per episode.
    pub episode_len: usize,
    pub history: usize,
    /// Violation label horizon, intervals.
    pub horizon: usize,
    /// Probabilities of (down, hold, up) moves below QoS.
    pub bias: [f64; 3],
    /// A down-move is turned into a hold if it would push the tier's
    /// projected utilization (busy fraction scaled by the capacity ratio,
    /// so it may exceed 1) above this.
    pub util_ceiling: f64,
    /// Below QoS, a tier busier than this triggers an upscale instead of a
    /// random move.
    pub saturation_util: f64,
    pub mode: CollectorMode,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            qos_ms: 500.0,
            alpha_ms: 100.0,
            freq_step: 1,
            episode_len: 600,
            history: DEFAULT_HISTORY,
            horizon: 5,
            bias: [0.5, 0.3, 0.2],
            util_ceiling: 1.2,
            saturation_util: 0.98,
            mode: CollectorMode::Explore,
        }
    }
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.qos_ms > 0.0) {
            return Err(Error::config("qos_ms must be positive"));
        }
        if !(self.alpha_ms > 0.0 && self.alpha_ms <= self.qos_ms) {
            return Err(Error::config("alpha_ms must lie in (0, qos_ms]"));
        }
        if self.freq_step == 0 || self.episode_len == 0 || self.history == 0 || self.horizon == 0 {
            return Err(Error::config(
                "freq_step, episode_len, history and horizon must be positive",
            ));
        }
        if !(self.util_ceiling > 0.0 && self.saturation_util > 0.0) {
            return Err(Error::config("util_ceiling and saturation_util must be positive"));
        }
        let s: f64 = self.bias.iter().sum();
        if self.bias.iter().any(|&b| b < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "exploration bias must be three non-negative weights summing to 1",
            ));
        }
        Ok(())
    }
}

/// One collection episode: a load trace, a seed, and an optional fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub trace: LoadTrace,
    pub seed: u64,
    pub fault: Option<StallFault>,
}

/// One applied allocation and its outcome, for the collection audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub episode: u32,
    pub interval: u32,
    pub load_qps: f64,
    pub cores: Vec<u32>,
    pub freq_idx: Vec<usize>,
    pub p99_ms: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub dataset: Dataset,
    pub audit: Vec<AuditRow>,
}

impl Collection {
    /// Fraction of intervals whose p99 exceeded `QoS + α`.
    pub fn above_region_fraction(&self, qos_ms: f64, alpha_ms: f64) -> f64 {
        if self.audit.is_empty() {
            return 0.0;
        }
        let above = self.audit.iter().filter(|r| r.p99_ms > qos_ms + alpha_ms).count();
        above as f64 / self.audit.len() as f64
    }

    pub fn write_audit_csv<W: Write>(&self, out: W, tier_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["episode".to_string(), "interval".into(), "load_qps".into()];
        head.extend(tier_names.iter().map(|t| format!("cores_{t}")));
        head.extend(tier_names.iter().map(|t| format!("freq_{t}")));
        head.extend(["p99_ms".to_string(), "label".into()]);
        w.write_record(&head)?;
        for r in &self.audit {
            let mut row = vec![r.episode.to_string(), r.interval.to_string(), r.load_qps.to_string()];
            row.extend(r.cores.iter().map(u32::to_string));
            row.extend(r.freq_idx.iter().map(usize::to_string));
            row.push(r.p99_ms.to_string());
            row.push(r.label.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<audit csv>", e))
    }
}

/// Distinct core counts and frequency levels each tier experienced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub cores: Vec<usize>,
    pub freqs: Vec<usize>,
}

impl Coverage {
    pub fn of(audit: &[AuditRow], n_tiers: usize) -> Self {
        let mut cores = vec![BTreeSet::new(); n_tiers];
        let mut freqs = vec![BTreeSet::new(); n_tiers];
        for r in audit {
            for t in 0..n_tiers {
                cores[t].insert(r.cores[t]);
                freqs[t].insert(r.freq_idx[t]);
            }
        }
        Coverage {
            cores: cores.iter().map(BTreeSet::len).collect(),
            freqs: freqs.iter().map(BTreeSet::len).collect(),
        }
    }

    pub fn min_cores(&self) -> usize {
        self.cores.iter().copied().min().unwrap_or(0)
    }

    pub fn min_freqs(&self) -> usize {
        self.freqs.iter().copied().min().unwrap_or(0)
    }
}

/// Label `t` is 1 iff any of intervals `t..t+horizon` (clipped to the
/// episode) had p99 above QoS.
pub fn label_violations(p99: &[f64], qos_ms: f64, horizon: usize) -> Vec<u8> {
    let n = p99.len();
    let mut labels = vec![0u8; n];
    // index of the nearest violation at or after t
    let mut next_violation = usize::MAX;
    for t in (0..n).rev() {
        if p99[t] > qos_ms {
            next_violation = t;
        }
        labels[t] = u8::from(next_violation != usize::MAX && next_violation < t + horizon);
    }
    labels
}

/// Moves one tier one quantum (cores) or one step (frequency) in a random
/// direction; impossible moves become holds.
fn random_move<R: Rng + ?Sized>(
    spec: &GraphSpec,
    current: &Allocation,
    bias: [f64; 3],
    freq_step: usize,
    rng: &mut R,
) -> Allocation {
    let tier = rng.random_range(0..current.n_tiers());
    let knob_cores = rng.random_bool(0.5);
    let u: f64 = rng.random();
    let q = spec.core_quantum;
    let mut next = current.clone();
    if u < bias[0] {
        if knob_cores && current.cores[tier] >= 2 * q {
            next.cores[tier] -= q;
        } else if !knob_cores && current.freq_idx[tier] >= freq_step {
            next.freq_idx[tier] -= freq_step;
        }
    } else if u >= bias[0] + bias[1] {
        if knob_cores && current.total_cores() + q <= spec.total_cores {
            next.cores[tier] += q;
        } else if !knob_cores && current.freq_idx[tier] + freq_step <= spec.max_freq_idx() {
            next.freq_idx[tier] += freq_step;
        }
    }
    next
}

/// The exploration policy.
///
/// * p99 above `QoS + α`: upscale the most utilized tier.
/// * p99 in `(QoS, QoS + α]`: hold or upscale with equal odds.
/// * otherwise, if some tier is busier than `cfg.saturation_util`: upscale
///   the most utilized tier.
/// * otherwise: a random single-tier move, down/hold/up per `cfg.bias`;
///   a down-move that would lift the tier's projected utilization above
///   `cfg.util_ceiling` becomes a hold.
pub fn explore_action<R: Rng + ?Sized>(
    window: &TelemetryWindow,
    spec: &GraphSpec,
    current: &Allocation,
    last_p99: f64,
    cfg: &CollectorConfig,
    rng: &mut R,
) -> Allocation {
    if last_p99 > cfg.qos_ms + cfg.alpha_ms {
        upscale_hottest(window, spec, current, cfg.freq_step, cfg.util_ceiling)
            .map_or_else(|| current.clone(), |c| c.alloc)
    } else if last_p99 > cfg.qos_ms {
        if rng.random_bool(0.5) {
            upscale_hottest(window, spec, current, cfg.freq_step, cfg.util_ceiling)
                .map_or_else(|| current.clone(), |c| c.alloc)
        } else {
            current.clone()
        }
    } else if (0..current.n_tiers()).any(|t| utilization(window, t) > cfg.saturation_util) {
        upscale_hottest(window, spec, current, cfg.freq_step, cfg.util_ceiling)
            .map_or_else(|| current.clone(), |c| c.alloc)
    } else {
        let next = random_move(spec, current, cfg.bias, cfg.freq_step, rng);
        match (0..next.n_tiers())
            .find(|&t| next.cores[t] != current.cores[t] || next.freq_idx[t] != current.freq_idx[t])
        {
            Some(t) if next.cores[t] <= current.cores[t] && next.freq_idx[t] <= current.freq_idx[t] => {
                if projected_utilization(window, spec, current, &next, t) > cfg.util_ceiling {
                    current.clone()
                } else {
                    next
                }
            }
            _ => next,
        }
    }
}

/// Starting point of an episode: a random frequency in the top half per
/// tier, and cores for the tier's demand at the initial load and that
/// frequency plus a random headroom of 30% to 200%. Headroom shrinks
/// first when the pool is too small.
pub fn initial_allocation<R: Rng + ?Sized>(spec: &GraphSpec, trace: &LoadTrace, rng: &mut R) -> Result<Allocation> {
    let topo = spec.validate()?;
    let demand = spec.demand_per_request(&topo, &trace.mix);
    let load = trace.rate_at(0.0);
    let q = spec.core_quantum;
    let n = spec.n_tiers();
    let top = spec.max_freq_idx();
    let freq_idx: Vec<usize> = (0..n).map(|_| rng.random_range(top / 2..=top)).collect();
    let base: Vec<f64> = (0..n).map(|t| demand[t] * load / spec.speed(freq_idx[t])).collect();
    let head: Vec<f64> = base.iter().map(|b| b * (rng.random_range(1.3..3.0) - 1.0)).collect();
    let room = f64::from(spec.total_cores) - base.iter().sum::<f64>();
    let head_sum: f64 = head.iter().sum();
    let scale = if head_sum > room {
        (room / head_sum).max(0.0)
    } else {
        1.0
    };
    let mut cores: Vec<u32> = (0..n)
        .map(|t| (((base[t] + scale * head[t]) / f64::from(q)).ceil() as u32).max(1) * q)
        .collect();
    while cores.iter().sum::<u32>() > spec.total_cores {
        let fattest = (0..n)
            .max_by_key(|&t| (cores[t], std::cmp::Reverse(t)))
            .expect("n >= 1");
        cores[fattest] -= q;
    }
    Ok(Allocation { cores, freq_idx })
}

/// A standard schedule of collection episodes: constant loads cycling
/// through 10%..100% of `peak_qps`, with every third episode a diurnal
/// ramp instead. Episode `k` uses seed `seed + k`.
pub fn plan_episodes(
    peak_qps: f64,
    episodes: usize,
    episode_len: usize,
    seed: u64,
    fault: Option<StallFault>,
) -> Result<Vec<EpisodePlan>> {
    (0..episodes)
        .map(|k| {
            let trace = if k % 3 == 2 {
                diurnal_trace(peak_qps, episode_len as f64)?
            } else {
                let level = (k * 7) % 10;
                constant_trace(0.1 + 0.1 * level as f64, peak_qps, episode_len as f64)?
            };
            Ok(EpisodePlan {
                trace,
                seed: seed.wrapping_add(k as u64),
                fault: fault.clone(),
            })
        })
        .collect()
}

pub fn header(spec: &GraphSpec, cfg: &CollectorConfig) -> DatasetHeader {
    DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        n_tiers: spec.n_tiers(),
        history: cfg.history,
        channels: N_CHANNELS,
        horizon: cfg.horizon,
        qos_ms: cfg.qos_ms,
        alpha_ms: cfg.alpha_ms,
        tier_names: spec.tiers.iter().map(|t| t.name.clone()).collect(),
    }
}

/// Runs every episode in order and returns one sample per simulated
/// interval.
pub fn run_collection(spec: &GraphSpec, episodes: &[EpisodePlan], cfg: &CollectorConfig) -> Result<Collection> {
    cfg.validate()?;
    spec.validate()?;
    let mut dataset = Dataset::new(header(spec, cfg));
    let mut audit = Vec::new();
    for (e, plan) in episodes.iter().enumerate() {
        let (samples, rows) = run_episode(spec, plan, cfg, e as u32)?;
        dataset.samples.extend(samples);
        audit.extend(rows);
    }
    Ok(Collection { dataset, audit })
}

fn run_episode(
    spec: &GraphSpec,
    plan: &EpisodePlan,
    cfg: &CollectorConfig,
    episode: u32,
) -> Result<(Vec<Sample>, Vec<AuditRow>)> {
    let mut cluster = build_cluster(spec, plan.seed)?;
    if let Some(fault) = &plan.fault {
        cluster.inject_stall(fault)?;
    }
    let arrivals = ArrivalStream::new(plan.trace.clone(), plan.seed.wrapping_add(ARRIVAL_SEED_OFFSET));
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(u64::MAX);
    let mut window = TelemetryWindow::new(spec, cfg.history);
    let mut tracker = PercentileTracker::default();
    let mut alloc = initial_allocation(spec, &plan.trace, &mut rng)?;
    let mut last_p99 = 0.0;
    let len = cfg.episode_len.min(plan.trace.seconds());

    let mut samples = Vec::with_capacity(len);
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            alloc = match cfg.mode {
                CollectorMode::Explore => explore_action(&window, spec, &alloc, last_p99, cfg, &mut rng),
                CollectorMode::Random => random_move(spec, &alloc, [1.0 / 3.0; 3], cfg.freq_step, &mut rng),
                CollectorMode::Autoscaler(policy) => {
                    let util: Vec<f64> = (0..spec.n_tiers()).map(|k| utilization(&window, k)).collect();
                    autoscale(policy, spec, &util, &alloc)
                }
            };
        }
        let input = window.make_inputs(spec, &alloc)?;
        let stats = cluster.simulate_interval(&alloc, &arrivals.arrivals(t), INTERVAL)?;
        let (pct, _carried) = tracker.observe(&stats.latency_samples);
        samples.push(Sample {
            episode,
            interval: t as u32,
            rh: input.rh,
            lh: input.lh,
            rc: input.rc,
            percentiles: pct.0,
            label: 0,
        });
        rows.push(AuditRow {
            episode,
            interval: t as u32,
            load_qps: plan.trace.rate_at(t as f64),
            cores: alloc.cores.clone(),
            freq_idx: alloc.freq_idx.clone(),
            p99_ms: pct.p99(),
            label: 0,
        });
        window.push_interval(&stats, pct);
        last_p99 = pct.p99();
    }
    let p99: Vec<f64> = rows.iter().map(|r| r.p99_ms).collect();
    for (k, label) in label_violations(&p99, cfg.qos_ms, cfg.horizon).into_iter().enumerate() {
        samples[k].label = label;
        rows[k].label = label;
    }
    Ok((samples, rows))
}

/// Recomputes labels from the stored p99 values, episode by episode.
pub fn relabel(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(dataset.len());
    let mut start = 0;
    while start < dataset.len() {
        let ep = dataset.samples[start].episode;
        let end = dataset.samples[start..]
            .iter()
            .position(|s| s.episode != ep)
            .map_or(dataset.len(), |k| start + k);
        let p99: Vec<f64> = dataset.samples[start..end].iter().map(Sample::p99).collect();
        out.extend(label_violations(&p99, dataset.header.qos_ms, dataset.header.horizon));
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphsim::TierSpec;
    use crate::telemetry::LatencyPercentiles;
    use crate::workload::constant_trace;

    fn spec() -> GraphSpec {
        GraphSpec {
            request_types: vec!["r".into()],
            tiers: vec![
                TierSpec::new("a", 200.0, 256).calls("b", "r"),
                TierSpec::new("b", 100.0, 256),
            ],
            total_cores: 16,
            freq_levels: vec![0.4, 0.6, 0.8, 1.0],
            freq_exponent: 1.0,
            core_quantum: 1,
        }
    }

    fn warm_window(spec: &GraphSpec, util: [f64; 2]) -> TelemetryWindow {
        let mut w = TelemetryWindow::new(spec, 3);
        w.push_record(crate::telemetry::IntervalRecord {
            usage: util.iter().map(|&u| [u, 2.0, 1.0, 0.0, 0.2]).collect(),
            percentiles: LatencyPercentiles([10.0; 5]),
            input_rate: 0.0,
            output_rate: 0.0,
        });
        w
    }

    #[test]
    fn far_above_region_upscales_hottest_tier() {
        let spec = spec();
        let cfg = CollectorConfig::default();
        let w = warm_window(&spec, [0.3, 0.9]);
        let cur = Allocation::uniform(&spec, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let next = explore_action(&w, &spec, &cur, cfg.qos_ms + cfg.alpha_ms + 1.0, &cfg, &mut rng);
        assert_eq!(next.cores, vec![2, 3]);
    }

    #[test]
    fn low_latency_moves_are_single_tier_and_replayable() {
        let spec = spec();
        let cfg = CollectorConfig::default();
        let w = warm_window(&spec, [0.3, 0.3]);
        let cur = Allocation {
            cores: vec![3, 3],
            freq_idx: vec![2, 2],
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| explore_action(&w, &spec, &cur, 0.1 * cfg.qos_ms, &cfg, &mut rng))
                .collect::<Vec<_>>()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        for next in &a {
            let changed = (0..2)
                .filter(|&t| next.cores[t] != cur.cores[t] || next.freq_idx[t] != cur.freq_idx[t])
                .count();
            assert!(changed <= 1);
            assert!(next.is_valid(&spec));
        }
        assert!(a.iter().any(|n| n.total_cores() < 6));
    }

    #[test]
    fn floor_moves_become_holds() {
        let spec = spec();
        let cur = Allocation {
            cores: vec![1, 1],
            freq_idx: vec![0, 0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(random_move(&spec, &cur, [1.0, 0.0, 0.0], 1, &mut rng), cur);
        }
    }

    #[test]
    fn labels_look_ahead_within_the_horizon() {
        let p = [0.0, 0.0, 0.0, 900.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(label_violations(&p, 500.0, 2), vec![0, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(label_violations(&p, 500.0, 1), vec![0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(label_violations(&[600.0; 3], 500.0, 5), vec![1, 1, 1]);
    }

    #[test]
    fn collection_counts_and_relabels() {
        let spec = spec();
        let cfg = CollectorConfig {
            episode_len: 40,
            qos_ms: 60.0,
            alpha_ms: 12.0,
            ..CollectorConfig::default()
        };
        let plans: Vec<EpisodePlan> = (0..3)
            .map(|k| EpisodePlan {
                trace: constant_trace(0.5 + 0.2 * k as f64, 300.0, 40.0)
                    .and_then(|t| t.with_mix(vec![1.0]))
                    .unwrap(),
                seed: k,
                fault: None,
            })
            .collect();
        let c = run_collection(&spec, &plans, &cfg).unwrap();
        assert_eq!(c.dataset.len(), 120);
        assert_eq!(relabel(&c.dataset), c.dataset.labels());
        let again = run_collection(&spec, &plans, &cfg).unwrap();
        assert_eq!(again.dataset.to_bytes().unwrap(), c.dataset.to_bytes().unwrap());
        for r in &c.audit {
            assert!(Allocation {
                cores: r.cores.clone(),
                freq_idx: r.freq_idx.clone()
            }
            .is_valid(&spec));
        }
        let mut out = Vec::new();
        c.write_audit_csv(&mut out, &["a".into(), "b".into()]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 121);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = CollectorConfig {
            alpha_ms: 600.0,
            ..CollectorConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
