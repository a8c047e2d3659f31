use crate::error::{Error, Result};
use crate::graphsim::{Allocation, Arrival, ClusterState, GraphSpec};
use crate::mlcore::HybridModel;
use crate::telemetry::{tail_percentiles, TelemetryWindow};

/// Predicted outcome of running one interval under a candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub p99_ms: f64,
    pub p_violation: f64,
}

/// Anything that can score candidate allocations for the scheduler.
pub trait Predictor {
    fn estimate(
        &mut self,
        window: &TelemetryWindow,
        spec: &GraphSpec,
        candidates: &[Allocation],
    ) -> Result<Vec<Estimate>>;
}

impl Predictor for HybridModel {
    fn estimate(
        &mut self,
        window: &TelemetryWindow,
        spec: &GraphSpec,
        candidates: &[Allocation],
    ) -> Result<Vec<Estimate>> {
        self.shape().check(&window.shape())?;
        let mut ws = self.cnn.workspace();
        candidates
            .iter()
            .map(|c| {
                let input = window.make_inputs(spec, c)?;
                let (p99_ms, p_violation) = self.predict_fast(&input, &mut ws)?;
                Ok(Estimate { p99_ms, p_violation })
            })
            .collect()
    }
}

/// Ground truth by simulation: each candidate is replayed on a copy of the
/// live cluster against the arrivals that will actually occur.
///
/// `p99_ms` is the next interval's realized p99; `p_violation` is 1 if QoS
/// is violated in any of the `lookahead` intervals with the candidate held,
/// else 0.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub qos_ms: f64,
    pub interval: f64,
    pub lookahead: usize,
    cluster: Option<ClusterState>,
    upcoming: Vec<Vec<Arrival>>,
}

impl OraclePredictor {
    pub fn new(qos_ms: f64, interval: f64, lookahead: usize) -> Self {
        OraclePredictor {
            qos_ms,
            interval,
            lookahead: lookahead.max(1),
            cluster: None,
            upcoming: Vec::new(),
        }
    }

    /// Snapshot of the live cluster and the arrivals of the next intervals
    /// (first entry = the interval being decided).
    pub fn observe(&mut self, cluster: &ClusterState, upcoming: Vec<Vec<Arrival>>) {
        self.cluster = Some(cluster.clone());
        self.upcoming = upcoming;
    }
}

impl Predictor for OraclePredictor {
    fn estimate(
        &mut self,
        _window: &TelemetryWindow,
        _spec: &GraphSpec,
        candidates: &[Allocation],
    ) -> Result<Vec<Estimate>> {
        let base = self
            .cluster
            .as_ref()
            .ok_or_else(|| Error::config("oracle has not observed the cluster yet"))?;
        let mut out = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let mut sim = base.clone();
            let mut first = 0.0;
            let mut violated = false;
            for (k, arrivals) in self.upcoming.iter().take(self.lookahead).enumerate() {
                let stats = sim.simulate_interval(cand, arrivals, self.interval)?;
                let p99 = tail_percentiles(&stats.latency_samples).map_or(0.0, |p| p.p99());
                if k == 0 {
                    first = p99;
                }
                violated |= p99 > self.qos_ms;
            }
            out.push(Estimate {
                p99_ms: first,
                p_violation: if violated { 1.0 } else { 0.0 },
            });
        }
        Ok(out)
    }
}
