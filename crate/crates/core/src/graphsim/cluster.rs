use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::spec::{Allocation, GraphSpec, Topology, STALL_DIRTY_SPAN};
use super::stats::{IntervalStats, TierStats};
use crate::error::{Error, Result};

/// One externally generated request entering the front-end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    /// Absolute simulation time, seconds.
    pub time: f64,
    /// Index into `GraphSpec::request_types`.
    pub kind: usize,
}

/// Periodic service outage of one tier (e.g. a fork-and-flush persistence
/// job). Windows start at `k * period` for `k = 0, 1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StallFault {
    pub tier: String,
    /// Seconds between stall starts.
    pub period: f64,
    /// Milliseconds the tier serves nothing.
    pub stall_duration: f64,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival { kind: usize },
    Done { tier: usize, server: usize, gen: u64 },
    StallStart { tier: usize },
    StallEnd { tier: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct Request {
    kind: usize,
    hop: usize,
    born: f64,
    entered_tier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ServerState {
    Idle,
    Busy {
        req: usize,
        done_at: f64,
    },
    /// Finished here, waiting for room downstream.
    Blocked {
        req: usize,
    },
}

#[derive(Debug, Clone)]
struct Server {
    state: ServerState,
    gen: u64,
}

#[derive(Debug, Clone)]
struct StallSchedule {
    period: f64,
    duration: f64,
    last_flush: f64,
}

#[derive(Debug, Clone, Default)]
struct TierState {
    cores: u32,
    speed: f64,
    rel_freq: f64,
    servers: Vec<Server>,
    queue: VecDeque<usize>,
    busy: u32,
    blocked: u32,
    /// Upstream `(tier, server)` pairs holding a request for this tier.
    waiting_upstream: VecDeque<(usize, usize)>,
    stalled: bool,
    stall: Option<StallSchedule>,

    // per-interval accounting
    busy_area: f64,
    last_account: f64,
    peak_queue: usize,
    residence_sum: f64,
    residence_n: u64,
    /// Full-speed core-seconds of work admitted this interval.
    offered_work: f64,
}

impl TierState {
    fn account(&mut self, now: f64) {
        self.busy_area += f64::from(self.busy) * (now - self.last_account);
        self.last_account = now;
    }

    fn occupied(&self) -> u32 {
        self.busy + self.blocked
    }
}

/// Cumulative request counters since the cluster was built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
}

/// A running simulated deployment: the event clock, every in-flight request
/// and per-tier queues. Cloning yields an independent replica that evolves
/// identically under identical inputs.
#[derive(Debug, Clone)]
pub struct ClusterState {
    spec: GraphSpec,
    topo: Topology,
    now: f64,
    seq: u64,
    rng: ChaCha8Rng,
    events: BinaryHeap<Event>,
    requests: Vec<Request>,
    free_slots: Vec<usize>,
    in_flight: u64,
    tiers: Vec<TierState>,
    alloc: Option<Allocation>,
    totals: Totals,
    stall_windows: u64,
    // scratch for the current interval
    latencies: Vec<f64>,
}

/// Builds an empty cluster for `spec` whose service times come from a
/// ChaCha stream seeded with `seed`.
pub fn build_cluster(spec: &GraphSpec, seed: u64) -> Result<ClusterState> {
    let topo = spec.validate()?;
    let tiers = (0..spec.n_tiers()).map(|_| TierState::default()).collect();
    Ok(ClusterState {
        spec: spec.clone(),
        topo,
        now: 0.0,
        seq: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        events: BinaryHeap::new(),
        requests: Vec::new(),
        free_slots: Vec::new(),
        in_flight: 0,
        tiers,
        alloc: None,
        totals: Totals::default(),
        stall_windows: 0,
        latencies: Vec::new(),
    })
}

impl ClusterState {
    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Current simulation time, seconds.
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn in_flight(&self) -> u64 {
        self.in_flight
    }

    pub fn totals(&self) -> Totals {
        self.totals
    }

    /// Allocation applied during the most recent interval.
    pub fn allocation(&self) -> Option<&Allocation> {
        self.alloc.as_ref()
    }

    /// Number of stall windows that have started so far.
    pub fn stall_windows(&self) -> u64 {
        self.stall_windows
    }

    pub fn queue_depth(&self, tier: usize) -> usize {
        self.tiers[tier].queue.len()
    }

    /// Makes `fault.tier` periodically stop serving.
    pub fn inject_stall(&mut self, fault: &StallFault) -> Result<()> {
        let tier = self
            .spec
            .tier_index(&fault.tier)
            .ok_or_else(|| Error::input(format!("unknown tier {:?}", fault.tier)))?;
        if !(fault.period > 0.0 && fault.period.is_finite()) {
            return Err(Error::input("stall period must be > 0"));
        }
        if !(fault.stall_duration >= 0.0 && fault.stall_duration.is_finite()) {
            return Err(Error::input("stall duration must be >= 0"));
        }
        let first = (self.now / fault.period).ceil() * fault.period;
        self.tiers[tier].stall = Some(StallSchedule {
            period: fault.period,
            duration: fault.stall_duration / 1000.0,
            last_flush: self.now,
        });
        self.schedule(first, EventKind::StallStart { tier });
        Ok(())
    }

    /// Advances the clock by `interval` seconds under `alloc`, feeding in
    /// `arrivals` (which must fall inside the interval).
    pub fn simulate_interval(
        &mut self,
        alloc: &Allocation,
        arrivals: &[Arrival],
        interval: f64,
    ) -> Result<IntervalStats> {
        alloc.validate(&self.spec)?;
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(Error::input("interval must be > 0"));
        }
        let start = self.now;
        let end = start + interval;
        let n_types = self.spec.request_types.len();
        for a in arrivals {
            if a.kind >= n_types {
                return Err(Error::input(format!("unknown request type index {}", a.kind)));
            }
            if !(a.time >= start && a.time < end) {
                return Err(Error::input(format!(
                    "arrival at t={} outside interval [{start}, {end})",
                    a.time
                )));
            }
        }

        for t in &mut self.tiers {
            t.busy_area = 0.0;
            t.last_account = start;
            t.peak_queue = t.queue.len();
            t.residence_sum = 0.0;
            t.residence_n = 0;
            t.offered_work = 0.0;
        }
        self.latencies.clear();
        let before = self.totals;

        self.apply_allocation(alloc);
        for a in arrivals {
            self.schedule(a.time, EventKind::Arrival { kind: a.kind });
        }

        while let Some(ev) = self.events.peek() {
            if ev.time >= end {
                break;
            }
            let ev = self.events.pop().expect("peeked");
            self.now = ev.time;
            self.handle(ev.kind);
        }
        self.now = end;

        let mut tier_stats = Vec::with_capacity(self.tiers.len());
        for (i, t) in self.tiers.iter_mut().enumerate() {
            t.account(end);
            let capacity = f64::from(t.cores) * interval;
            let util = if capacity > 0.0 {
                (t.busy_area / capacity).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let spec = &self.spec.tiers[i];
            let depth_frac = t.peak_queue as f64 / spec.queue_capacity as f64;
            let mut memory = spec.mem_base + spec.mem_per_request * depth_frac.min(1.0);
            if let Some(s) = &t.stall {
                let dirty = ((end - s.last_flush) / s.period).clamp(0.0, 1.0);
                memory += STALL_DIRTY_SPAN * dirty;
            }
            tier_stats.push(TierStats {
                cpu_utilization: util,
                queue_depth: t.queue.len(),
                memory_proxy: memory,
                residence_ms: if t.residence_n > 0 {
                    1000.0 * t.residence_sum / t.residence_n as f64
                } else {
                    0.0
                },
                cores: t.cores,
                rel_freq: t.rel_freq,
                capacity_cores: f64::from(t.cores) * t.speed,
                offered_cores: t.offered_work / interval,
            });
        }

        Ok(IntervalStats {
            start,
            duration: interval,
            tiers: tier_stats,
            latency_samples: std::mem::take(&mut self.latencies),
            arrivals: self.totals.arrivals - before.arrivals,
            completions: self.totals.completions - before.completions,
            drops: self.totals.drops - before.drops,
            in_flight: self.in_flight,
        })
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn apply_allocation(&mut self, alloc: &Allocation) {
        for i in 0..self.tiers.len() {
            let speed = self.spec.speed(alloc.freq_idx[i]);
            let rel = self.spec.rel_freq(alloc.freq_idx[i]);
            let t = &mut self.tiers[i];
            // In-service requests finish at the speed they started with;
            // a core cut takes effect as servers drain.
            t.cores = alloc.cores[i];
            t.speed = speed;
            t.rel_freq = rel;
            self.fill_servers(i);
        }
        self.alloc = Some(alloc.clone());
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Arrival { kind } => self.on_arrival(kind),
            EventKind::Done { tier, server, gen } => {
                if self.tiers[tier].servers[server].gen == gen {
                    self.on_done(tier, server);
                }
            }
            EventKind::StallStart { tier } => self.on_stall_start(tier),
            EventKind::StallEnd { tier } => self.on_stall_end(tier),
        }
    }

    fn on_arrival(&mut self, kind: usize) {
        self.totals.arrivals += 1;
        let req = Request {
            kind,
            hop: 0,
            born: self.now,
            entered_tier: self.now,
        };
        let id = match self.free_slots.pop() {
            Some(slot) => {
                self.requests[slot] = req;
                slot
            }
            None => {
                self.requests.push(req);
                self.requests.len() - 1
            }
        };
        self.in_flight += 1;
        let entry = self.topo.paths[kind][0].0;
        if !self.admit(entry, id) {
            self.totals.drops += 1;
            self.in_flight -= 1;
            self.free_slots.push(id);
        }
    }

    /// Places `req` at `tier`: straight into service if a core is free,
    /// else into the queue. Returns false when the queue is full.
    fn admit(&mut self, tier: usize, req: usize) -> bool {
        let (kind, hop) = (self.requests[req].kind, self.requests[req].hop);
        let work = self.topo.paths[kind][hop].1 / self.spec.tiers[tier].base_rate;
        let t = &self.tiers[tier];
        if t.queue.len() < self.spec.tiers[tier].queue_capacity || (!t.stalled && t.occupied() < t.cores) {
            self.tiers[tier].offered_work += work;
        }
        let t = &self.tiers[tier];
        if !t.stalled && t.occupied() < t.cores {
            self.requests[req].entered_tier = self.now;
            let server = self.idle_server(tier);
            self.start_service(tier, server, req);
            true
        } else if t.queue.len() < self.spec.tiers[tier].queue_capacity {
            self.requests[req].entered_tier = self.now;
            let t = &mut self.tiers[tier];
            t.queue.push_back(req);
            t.peak_queue = t.peak_queue.max(t.queue.len());
            true
        } else {
            false
        }
    }

    fn idle_server(&mut self, tier: usize) -> usize {
        let t = &mut self.tiers[tier];
        match t.servers.iter().position(|s| s.state == ServerState::Idle) {
            Some(i) => i,
            None => {
                t.servers.push(Server {
                    state: ServerState::Idle,
                    gen: 0,
                });
                t.servers.len() - 1
            }
        }
    }

    fn start_service(&mut self, tier: usize, server: usize, req: usize) {
        let (kind, hop) = (self.requests[req].kind, self.requests[req].hop);
        let visits = self.topo.paths[kind][hop].1;
        let work: f64 = Exp1.sample(&mut self.rng);
        let now = self.now;
        let t = &mut self.tiers[tier];
        let duration = work * visits / (self.spec.tiers[tier].base_rate * t.speed);
        let done_at = now + duration;
        t.account(now);
        t.busy += 1;
        let s = &mut t.servers[server];
        s.gen += 1;
        s.state = ServerState::Busy { req, done_at };
        let gen = s.gen;
        self.schedule(done_at, EventKind::Done { tier, server, gen });
    }

    fn on_done(&mut self, tier: usize, server: usize) {
        let now = self.now;
        let req = match self.tiers[tier].servers[server].state {
            ServerState::Busy { req, .. } => req,
            _ => unreachable!("completion for a server that is not busy"),
        };
        {
            let t = &mut self.tiers[tier];
            t.account(now);
            t.busy -= 1;
        }
        self.requests[req].hop += 1;
        let r = &self.requests[req];
        let path = &self.topo.paths[r.kind];
        if let Some(&(next, _)) = path.get(r.hop) {
            let entered = r.entered_tier;
            if self.admit(next, req) {
                self.record_residence(tier, entered);
                self.release(tier, server);
            } else {
                let t = &mut self.tiers[tier];
                t.servers[server].state = ServerState::Blocked { req };
                t.blocked += 1;
                self.tiers[next].waiting_upstream.push_back((tier, server));
            }
        } else {
            let (entered, born) = (r.entered_tier, r.born);
            self.record_residence(tier, entered);
            self.latencies.push(1000.0 * (now - born));
            self.totals.completions += 1;
            self.in_flight -= 1;
            self.free_slots.push(req);
            self.release(tier, server);
        }
    }

    fn record_residence(&mut self, tier: usize, entered: f64) {
        let t = &mut self.tiers[tier];
        t.residence_sum += self.now - entered;
        t.residence_n += 1;
    }

    /// Frees `server` and lets it pick up queued work.
    fn release(&mut self, tier: usize, server: usize) {
        self.tiers[tier].servers[server].state = ServerState::Idle;
        self.fill_servers(tier);
    }

    /// Starts queued requests while cores are available, then hands freed
    /// queue slots to blocked upstream servers.
    fn fill_servers(&mut self, tier: usize) {
        loop {
            let t = &self.tiers[tier];
            if t.stalled || t.occupied() >= t.cores || t.queue.is_empty() {
                break;
            }
            let req = self.tiers[tier].queue.pop_front().expect("non-empty");
            let server = self.idle_server(tier);
            self.start_service(tier, server, req);
        }
        self.unblock_upstream(tier);
    }

    fn unblock_upstream(&mut self, tier: usize) {
        while self.tiers[tier].queue.len() < self.spec.tiers[tier].queue_capacity
            || (!self.tiers[tier].stalled && self.tiers[tier].occupied() < self.tiers[tier].cores)
        {
            let Some((up, up_server)) = self.tiers[tier].waiting_upstream.pop_front() else {
                break;
            };
            let req = match self.tiers[up].servers[up_server].state {
                ServerState::Blocked { req } => req,
                _ => unreachable!("waiting upstream server is not blocked"),
            };
            let entered = self.requests[req].entered_tier;
            let placed = self.admit(tier, req);
            debug_assert!(placed);
            self.tiers[up].blocked -= 1;
            self.record_residence(up, entered);
            self.release(up, up_server);
        }
    }

    fn on_stall_start(&mut self, tier: usize) {
        let now = self.now;
        let (period, duration) = {
            let s = self.tiers[tier].stall.as_mut().expect("stall scheduled");
            s.last_flush = now;
            (s.period, s.duration)
        };
        self.stall_windows += 1;
        self.schedule(now + period, EventKind::StallStart { tier });
        if duration <= 0.0 {
            return;
        }
        self.tiers[tier].stalled = true;
        // Push out in-progress completions by the outage length.
        let mut resched = Vec::new();
        for (i, s) in self.tiers[tier].servers.iter_mut().enumerate() {
            if let ServerState::Busy { req, done_at } = s.state {
                s.gen += 1;
                let done_at = done_at + duration;
                s.state = ServerState::Busy { req, done_at };
                resched.push((i, s.gen, done_at));
            }
        }
        for (server, gen, at) in resched {
            self.schedule(at, EventKind::Done { tier, server, gen });
        }
        self.schedule(now + duration, EventKind::StallEnd { tier });
    }

    fn on_stall_end(&mut self, tier: usize) {
        self.tiers[tier].stalled = false;
        self.fill_servers(tier);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tandem(cap_leaf: usize) -> GraphSpec {
        use super::super::spec::TierSpec;
        GraphSpec {
            request_types: vec!["r".into()],
            tiers: vec![
                TierSpec::new("up", 200.0, 10_000).calls("leaf", "r"),
                TierSpec::new("leaf", 100.0, cap_leaf),
            ],
            total_cores: 8,
            freq_levels: vec![0.5, 1.0],
            freq_exponent: 1.0,
            core_quantum: 1,
        }
    }

    fn poisson_arrivals(rate: f64, start: f64, len: f64, seed: u64) -> Vec<Arrival> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = start;
        let mut out = Vec::new();
        loop {
            let u: f64 = rng.random();
            t += -(1.0 - u).ln() / rate;
            if t >= start + len {
                break;
            }
            out.push(Arrival { time: t, kind: 0 });
        }
        out
    }

    #[test]
    fn fresh_cluster_is_empty() {
        let c = build_cluster(&GraphSpec::social_network(), 7).unwrap();
        assert_eq!(c.in_flight(), 0);
        assert_eq!(c.totals(), Totals::default());
    }

    #[test]
    fn idle_interval() {
        let spec = GraphSpec::social_network();
        let mut c = build_cluster(&spec, 1).unwrap();
        let a = Allocation::uniform(&spec, 2, 9);
        let s = c.simulate_interval(&a, &[], 1.0).unwrap();
        assert!(s.latency_samples.is_empty());
        assert!(s.tiers.iter().all(|t| t.cpu_utilization == 0.0));
        assert_eq!(c.now(), 1.0);
    }

    #[test]
    fn rejects_unknown_type_and_out_of_window_arrivals() {
        let spec = tandem(10);
        let mut c = build_cluster(&spec, 1).unwrap();
        let a = Allocation::uniform(&spec, 1, 1);
        let bad = [Arrival { time: 0.5, kind: 3 }];
        assert!(matches!(c.simulate_interval(&a, &bad, 1.0), Err(Error::Input(_))));
        let late = [Arrival { time: 1.5, kind: 0 }];
        assert!(c.simulate_interval(&a, &late, 1.0).is_err());
    }

    #[test]
    fn conservation_every_interval() {
        let mut spec = tandem(3);
        spec.tiers[0].queue_capacity = 200;
        let mut c = build_cluster(&spec, 3).unwrap();
        let a = Allocation {
            cores: vec![2, 1],
            freq_idx: vec![1, 0],
        };
        for s in 0..20 {
            let arr = poisson_arrivals(120.0, s as f64, 1.0, s);
            c.simulate_interval(&a, &arr, 1.0).unwrap();
            let t = c.totals();
            assert_eq!(t.arrivals, t.completions + c.in_flight() + t.drops);
        }
        assert!(c.totals().drops > 0, "overloaded tandem should drop");
    }

    #[test]
    fn backpressure_blocks_upstream() {
        // Leaf saturated; with a tiny leaf queue the upstream tier holds
        // requests in blocked servers and its residence time grows.
        let run = |cap: usize| {
            let spec = tandem(cap);
            let mut c = build_cluster(&spec, 11).unwrap();
            let a = Allocation {
                cores: vec![4, 1],
                freq_idx: vec![1, 1],
            };
            let mut res = 0.0;
            for s in 0..10 {
                let arr = poisson_arrivals(150.0, s as f64, 1.0, 100 + s);
                let st = c.simulate_interval(&a, &arr, 1.0).unwrap();
                res += st.tiers[0].residence_ms;
            }
            res / 10.0
        };
        let roomy = run(100_000);
        let tight = run(2);
        assert!(
            tight > 5.0 * roomy,
            "upstream residence {tight} ms should dwarf {roomy} ms"
        );
    }

    #[test]
    fn stall_windows_counted() {
        let spec = tandem(100);
        let mut c = build_cluster(&spec, 5).unwrap();
        c.inject_stall(&StallFault {
            tier: "leaf".into(),
            period: 60.0,
            stall_duration: 200.0,
        })
        .unwrap();
        let a = Allocation::uniform(&spec, 2, 1);
        for _ in 0..600 {
            c.simulate_interval(&a, &[], 1.0).unwrap();
        }
        assert_eq!(c.stall_windows(), 10);
    }

    #[test]
    fn stall_on_unknown_tier() {
        let mut c = build_cluster(&tandem(4), 5).unwrap();
        let err = c
            .inject_stall(&StallFault {
                tier: "nope".into(),
                period: 1.0,
                stall_duration: 1.0,
            })
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn zero_length_stall_is_a_no_op() {
        let spec = tandem(100);
        let a = Allocation::uniform(&spec, 2, 1);
        let run = |fault: bool| {
            let mut c = build_cluster(&spec, 9).unwrap();
            if fault {
                c.inject_stall(&StallFault {
                    tier: "leaf".into(),
                    period: 2.0,
                    stall_duration: 0.0,
                })
                .unwrap();
            }
            (0..10)
                .flat_map(|s| {
                    let arr = poisson_arrivals(80.0, s as f64, 1.0, s);
                    c.simulate_interval(&a, &arr, 1.0).unwrap().latency_samples
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn stall_on_idle_tier_changes_nothing() {
        let spec = tandem(100);
        let a = Allocation::uniform(&spec, 2, 1);
        let mut c = build_cluster(&spec, 9).unwrap();
        c.inject_stall(&StallFault {
            tier: "leaf".into(),
            period: 1.0,
            stall_duration: 500.0,
        })
        .unwrap();
        for _ in 0..5 {
            let s = c.simulate_interval(&a, &[], 1.0).unwrap();
            assert!(s.latency_samples.is_empty());
            assert_eq!(s.tiers[1].queue_depth, 0);
        }
    }

    #[test]
    fn stall_delays_requests() {
        let spec = tandem(1000);
        let a = Allocation::uniform(&spec, 2, 1);
        let mut c = build_cluster(&spec, 9).unwrap();
        c.inject_stall(&StallFault {
            tier: "leaf".into(),
            period: 10.0,
            stall_duration: 200.0,
        })
        .unwrap();
        let arr = poisson_arrivals(50.0, 0.0, 1.0, 1);
        let s = c.simulate_interval(&a, &arr, 1.0).unwrap();
        let max = s.latency_samples.iter().cloned().fold(0.0, f64::max);
        assert!(max > 150.0, "max latency {max} should include the stall");
    }
}
