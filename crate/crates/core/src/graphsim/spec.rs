use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A call edge: requests of `request_type` leaving this tier go to `tier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub tier: String,
    pub request_type: String,
}

impl Edge {
    pub fn new(tier: &str, request_type: &str) -> Self {
        Edge {
            tier: tier.to_string(),
            request_type: request_type.to_string(),
        }
    }
}

/// One microservice tier, modeled as a bounded FCFS multi-server station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub name: String,
    /// Requests per second per core at the top frequency level.
    pub base_rate: f64,
    /// Visits per request type; a request's service demand at this tier is
    /// `visits / base_rate` core-seconds at full speed. Missing types count
    /// as one visit.
    #[serde(default)]
    pub visit_cost: BTreeMap<String, f64>,
    /// Max requests waiting (not in service).
    pub queue_capacity: usize,
    #[serde(default)]
    pub downstream: Vec<Edge>,
    /// Memory proxy = `mem_base + mem_per_request * peak queue depth`.
    #[serde(default = "default_mem_base")]
    pub mem_base: f64,
    #[serde(default = "default_mem_per_request")]
    pub mem_per_request: f64,
}

fn default_mem_base() -> f64 {
    0.2
}

fn default_mem_per_request() -> f64 {
    0.5
}

fn default_one() -> f64 {
    1.0
}

fn default_quantum() -> u32 {
    1
}

impl TierSpec {
    pub fn new(name: &str, base_rate: f64, queue_capacity: usize) -> Self {
        TierSpec {
            name: name.to_string(),
            base_rate,
            visit_cost: BTreeMap::new(),
            queue_capacity,
            downstream: Vec::new(),
            mem_base: default_mem_base(),
            mem_per_request: default_mem_per_request(),
        }
    }

    pub fn calls(mut self, tier: &str, request_type: &str) -> Self {
        self.downstream.push(Edge::new(tier, request_type));
        self
    }

    pub fn visits(mut self, request_type: &str, visits: f64) -> Self {
        self.visit_cost.insert(request_type.to_string(), visits);
        self
    }

    pub fn visits_for(&self, request_type: &str) -> f64 {
        self.visit_cost.get(request_type).copied().unwrap_or(1.0)
    }

    /// Upper bound of the memory proxy, used as its normalization constant.
    pub fn mem_scale(&self) -> f64 {
        self.mem_base + self.mem_per_request + STALL_DIRTY_SPAN
    }
}

/// Share of the memory scale taken by buffered writes of a periodically
/// persisting tier just before it flushes.
pub const STALL_DIRTY_SPAN: f64 = 0.5;

/// The application graph plus the resource pool it runs on.
///
/// Every request type enters at tier 0 and follows, from each tier, the
/// single downstream edge labelled with its type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub request_types: Vec<String>,
    pub tiers: Vec<TierSpec>,
    pub total_cores: u32,
    /// Relative frequencies, ascending, last one 1.0.
    pub freq_levels: Vec<f64>,
    /// Service rate scales with `rel_freq^freq_exponent`.
    #[serde(default = "default_one")]
    pub freq_exponent: f64,
    #[serde(default = "default_quantum")]
    pub core_quantum: u32,
}

/// Validated, index-based view of a [`GraphSpec`]'s call paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// For each request type, the ordered `(tier index, visits)` hops.
    pub paths: Vec<Vec<(usize, f64)>>,
}

/// `base_rate * cores * rel_freq^beta`.
pub fn service_rate(tier: &TierSpec, cores: u32, rel_freq: f64, beta: f64) -> f64 {
    tier.base_rate * f64::from(cores) * rel_freq.powf(beta)
}

/// `count` relative frequency levels spaced uniformly over `[lo, 1.0]`.
pub fn uniform_freq_levels(lo: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    1.0
                } else {
                    lo + (1.0 - lo) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

pub const READ_HOME: &str = "read-home";
pub const READ_USER: &str = "read-user";
pub const COMPOSE: &str = "compose";

/// Name of the timeline index store in the default topology.
pub const INDEX_STORE: &str = "index-store";

impl GraphSpec {
    /// Twelve-tier social network: a front-end, seven logic tiers, a cache,
    /// a timeline index store, a queue broker and a persistent store. Three
    /// request types: read home timeline, read user timeline, compose post.
    pub fn social_network() -> Self {
        let cap = 4096;
        let tiers = vec![
            TierSpec::new("front-end", 133.0, cap)
                .calls("home-timeline", READ_HOME)
                .calls("user-timeline", READ_USER)
                .calls("compose-post", COMPOSE),
            TierSpec::new("home-timeline", 50.0, cap).calls(INDEX_STORE, READ_HOME),
            TierSpec::new("user-timeline", 50.0, cap).calls(INDEX_STORE, READ_USER),
            TierSpec::new("compose-post", 100.0, cap).calls("text", COMPOSE),
            TierSpec::new("post-storage", 40.0, cap)
                .calls("memcached", READ_HOME)
                .calls("memcached", READ_USER),
            TierSpec::new("social-graph", 100.0, cap).calls(INDEX_STORE, COMPOSE),
            TierSpec::new("user", 200.0, cap).calls("social-graph", COMPOSE),
            TierSpec::new("text", 200.0, cap).calls("user", COMPOSE),
            TierSpec::new("memcached", 333.0, cap),
            TierSpec::new(INDEX_STORE, 250.0, cap)
                .calls("post-storage", READ_HOME)
                .calls("post-storage", READ_USER)
                .calls("queue-broker", COMPOSE),
            TierSpec::new("queue-broker", 500.0, cap).calls("persistent-store", COMPOSE),
            TierSpec::new("persistent-store", 50.0, cap),
        ];
        GraphSpec {
            request_types: vec![READ_HOME.into(), READ_USER.into(), COMPOSE.into()],
            tiers,
            total_cores: 150,
            freq_levels: uniform_freq_levels(0.4, 10),
            freq_exponent: 1.0,
            core_quantum: 1,
        }
    }

    /// One tier, one request type: an M/M/k station.
    pub fn single_tier(base_rate: f64, queue_capacity: usize, total_cores: u32) -> Self {
        GraphSpec {
            request_types: vec!["req".into()],
            tiers: vec![TierSpec::new("station", base_rate, queue_capacity)],
            total_cores,
            freq_levels: vec![1.0],
            freq_exponent: 1.0,
            core_quantum: 1,
        }
    }

    pub fn n_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn n_freq(&self) -> usize {
        self.freq_levels.len()
    }

    pub fn max_freq_idx(&self) -> usize {
        self.freq_levels.len().saturating_sub(1)
    }

    pub fn tier_index(&self, name: &str) -> Option<usize> {
        self.tiers.iter().position(|t| t.name == name)
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.request_types.iter().position(|t| t == name)
    }

    pub fn rel_freq(&self, freq_idx: usize) -> f64 {
        self.freq_levels[freq_idx]
    }

    /// Per-server speed multiplier at `freq_idx`.
    pub fn speed(&self, freq_idx: usize) -> f64 {
        self.freq_levels[freq_idx].powf(self.freq_exponent)
    }

    pub fn tier_service_rate(&self, tier: usize, cores: u32, freq_idx: usize) -> f64 {
        service_rate(&self.tiers[tier], cores, self.freq_levels[freq_idx], self.freq_exponent)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GraphSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks every structural invariant and resolves the call paths.
    pub fn validate(&self) -> Result<Topology> {
        let n = self.tiers.len();
        if n == 0 {
            return Err(Error::config("graph has no tiers"));
        }
        if self.request_types.is_empty() {
            return Err(Error::config("graph has no request types"));
        }
        if self.core_quantum == 0 {
            return Err(Error::config("core_quantum must be at least 1"));
        }
        if (self.total_cores as usize) < n * self.core_quantum as usize {
            return Err(Error::config(format!(
                "total_cores {} cannot give each of {} tiers a {}-core quantum",
                self.total_cores, n, self.core_quantum
            )));
        }
        if self.freq_levels.is_empty() {
            return Err(Error::config("at least one frequency level is required"));
        }
        if self.freq_levels.windows(2).any(|w| w[0] >= w[1])
            || self.freq_levels[0] <= 0.0
            || (self.freq_levels[self.freq_levels.len() - 1] - 1.0).abs() > 1e-12
        {
            return Err(Error::config(
                "freq_levels must be strictly ascending, positive, and end at 1.0",
            ));
        }
        if !(self.freq_exponent.is_finite() && self.freq_exponent >= 0.0) {
            return Err(Error::config("freq_exponent must be finite and >= 0"));
        }

        let mut by_name = HashMap::new();
        for (i, t) in self.tiers.iter().enumerate() {
            if by_name.insert(t.name.as_str(), i).is_some() {
                return Err(Error::config(format!("duplicate tier name {:?}", t.name)));
            }
            if !(t.base_rate > 0.0 && t.base_rate.is_finite()) {
                return Err(Error::config(format!("tier {:?}: base_rate must be > 0", t.name)));
            }
            if t.queue_capacity < 1 {
                return Err(Error::config(format!("tier {:?}: queue_capacity must be >= 1", t.name)));
            }
            if t.visit_cost.values().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::config(format!(
                    "tier {:?}: visit costs must be positive",
                    t.name
                )));
            }
        }
        let type_idx: HashMap<&str, usize> = self
            .request_types
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if type_idx.len() != self.request_types.len() {
            return Err(Error::config("duplicate request type"));
        }

        // next[tier][type] = downstream tier
        let mut next = vec![vec![None; self.request_types.len()]; n];
        let mut adjacency = vec![Vec::new(); n];
        for (i, t) in self.tiers.iter().enumerate() {
            for e in &t.downstream {
                let &j = by_name
                    .get(e.tier.as_str())
                    .ok_or_else(|| Error::config(format!("tier {:?} calls unknown tier {:?}", t.name, e.tier)))?;
                let &r = type_idx.get(e.request_type.as_str()).ok_or_else(|| {
                    Error::config(format!(
                        "tier {:?} has an edge for unknown request type {:?}",
                        t.name, e.request_type
                    ))
                })?;
                if next[i][r].replace(j).is_some() {
                    return Err(Error::config(format!(
                        "tier {:?} has two downstream edges for {:?}",
                        t.name, e.request_type
                    )));
                }
                adjacency[i].push(j);
            }
        }
        if let Some(cycle_at) = find_cycle(&adjacency) {
            return Err(Error::config(format!(
                "call graph has a cycle through tier {:?}",
                self.tiers[cycle_at].name
            )));
        }

        let paths = (0..self.request_types.len())
            .map(|r| {
                let mut path = Vec::new();
                let mut at = Some(0usize);
                while let Some(i) = at {
                    path.push((i, self.tiers[i].visits_for(&self.request_types[r])));
                    at = next[i][r];
                }
                path
            })
            .collect();
        Ok(Topology { paths })
    }

    /// Core-seconds each tier needs per request at full frequency, for a
    /// request mix.
    pub fn demand_per_request(&self, topo: &Topology, mix: &[f64]) -> Vec<f64> {
        let mut demand = vec![0.0; self.tiers.len()];
        for (path, &share) in topo.paths.iter().zip(mix) {
            for &(tier, visits) in path {
                demand[tier] += share * visits / self.tiers[tier].base_rate;
            }
        }
        demand
    }

    /// Load at which the whole pool at full frequency is 100% busy.
    pub fn saturation_qps(&self, topo: &Topology, mix: &[f64]) -> f64 {
        let total: f64 = self.demand_per_request(topo, mix).iter().sum();
        f64::from(self.total_cores) / total
    }

    /// Highest load the experiments treat as "100%": the pool at 80% busy.
    pub fn max_qps(&self, topo: &Topology, mix: &[f64]) -> f64 {
        0.8 * self.saturation_qps(topo, mix)
    }
}

/// Returns a tier on a cycle, if any (iterative three-color DFS).
fn find_cycle(adjacency: &[Vec<usize>]) -> Option<usize> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut mark = vec![Mark::White; adjacency.len()];
    for root in 0..adjacency.len() {
        if mark[root] != Mark::White {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Grey;
        while let Some(&mut (node, ref mut child)) = stack.last_mut() {
            if let Some(&next) = adjacency[node].get(*child) {
                *child += 1;
                match mark[next] {
                    Mark::Grey => return Some(next),
                    Mark::White => {
                        mark[next] = Mark::Grey;
                        stack.push((next, 0));
                    }
                    Mark::Black => {}
                }
            } else {
                mark[node] = Mark::Black;
                stack.pop();
            }
        }
    }
    None
}

/// Per-tier core count and frequency-level index (0-based into
/// `GraphSpec::freq_levels`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub cores: Vec<u32>,
    pub freq_idx: Vec<usize>,
}

impl Allocation {
    pub fn uniform(spec: &GraphSpec, cores: u32, freq_idx: usize) -> Self {
        Allocation {
            cores: vec![cores; spec.n_tiers()],
            freq_idx: vec![freq_idx; spec.n_tiers()],
        }
    }

    /// Splits the whole pool proportionally to `weights` (quantized, every
    /// tier at least one quantum), all tiers at top frequency.
    pub fn proportional(spec: &GraphSpec, weights: &[f64]) -> Self {
        let n = spec.n_tiers();
        let q = spec.core_quantum;
        let units = spec.total_cores / q;
        let spare = units - n as u32;
        let total_w: f64 = weights.iter().sum();
        let mut units_per: Vec<u32> = vec![1; n];
        let mut fractional: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut used = 0;
        for (i, &w) in weights.iter().enumerate() {
            let share = if total_w > 0.0 {
                f64::from(spare) * w / total_w
            } else {
                f64::from(spare) / n as f64
            };
            let whole = share.floor() as u32;
            units_per[i] += whole;
            used += whole;
            fractional.push((share - f64::from(whole), i));
        }
        // Largest remainders get the leftover units; ties by tier index.
        fractional.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in fractional.iter().take((spare - used) as usize) {
            units_per[i] += 1;
        }
        Allocation {
            cores: units_per.into_iter().map(|u| u * q).collect(),
            freq_idx: vec![spec.max_freq_idx(); n],
        }
    }

    pub fn n_tiers(&self) -> usize {
        self.cores.len()
    }

    pub fn total_cores(&self) -> u32 {
        self.cores.iter().sum()
    }

    /// Σ cores × relative frequency.
    pub fn weighted_freq(&self, spec: &GraphSpec) -> f64 {
        self.cores
            .iter()
            .zip(&self.freq_idx)
            .map(|(&c, &f)| f64::from(c) * spec.rel_freq(f))
            .sum()
    }

    pub fn validate(&self, spec: &GraphSpec) -> Result<()> {
        let n = spec.n_tiers();
        if self.cores.len() != n || self.freq_idx.len() != n {
            return Err(Error::input(format!(
                "allocation covers {} tiers, graph has {}",
                self.cores.len(),
                n
            )));
        }
        let q = spec.core_quantum;
        for (i, (&c, &f)) in self.cores.iter().zip(&self.freq_idx).enumerate() {
            if c < q || c % q != 0 {
                return Err(Error::input(format!(
                    "tier {i}: {c} cores is not a positive multiple of the {q}-core quantum"
                )));
            }
            if f >= spec.n_freq() {
                return Err(Error::input(format!(
                    "tier {i}: frequency index {f} out of range (F = {})",
                    spec.n_freq()
                )));
            }
        }
        if self.total_cores() > spec.total_cores {
            return Err(Error::input(format!(
                "allocation uses {} cores, pool has {}",
                self.total_cores(),
                spec.total_cores
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self, spec: &GraphSpec) -> bool {
        self.validate(spec).is_ok()
    }
}
