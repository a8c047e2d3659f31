//! Open-loop request traces: load shapes, Poisson arrivals with a request
//! mix, and the synthetic follower graph that decides who posts.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphsim::Arrival;

/// (read-home, read-user, compose).
pub const DEFAULT_MIX: [f64; 3] = [0.60, 0.30, 0.10];

/// Fraction of peak at the start and end of the diurnal ramp.
pub const DIURNAL_FLOOR: f64 = 0.10;

/// A piecewise-linear request rate over `[0, duration)` plus a request mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadTrace {
    pub duration: f64,
    /// `(time, rate)` knots, ascending in time.
    pub points: Vec<(f64, f64)>,
    pub mix: Vec<f64>,
}

impl LoadTrace {
    pub fn new(duration: f64, points: Vec<(f64, f64)>, mix: Vec<f64>) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::input("trace duration must be > 0"));
        }
        if points.is_empty() {
            return Err(Error::input("trace needs at least one rate knot"));
        }
        if points.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::input("rate knots must be ordered in time"));
        }
        if points
            .iter()
            .any(|&(t, r)| !t.is_finite() || !(r >= 0.0 && r.is_finite()))
        {
            return Err(Error::input("rates must be finite and >= 0"));
        }
        validate_mix(&mix)?;
        Ok(LoadTrace { duration, points, mix })
    }

    pub fn with_mix(mut self, mix: Vec<f64>) -> Result<Self> {
        validate_mix(&mix)?;
        self.mix = mix;
        Ok(self)
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let i = pts.partition_point(|&(x, _)| x <= t);
        let (t0, r0) = pts[i - 1];
        let (t1, r1) = pts[i];
        if t1 == t0 {
            return r1;
        }
        r0 + (r1 - r0) * (t - t0) / (t1 - t0)
    }

    /// Whole seconds in the trace.
    pub fn seconds(&self) -> usize {
        self.duration.ceil() as usize
    }

    pub fn peak_rate(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    /// One row per second: `second,rate,<mix fractions...>`.
    pub fn write_csv<W: Write>(&self, out: W, type_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["second".to_string(), "rate".to_string()];
        header.extend(type_names.iter().cloned());
        w.write_record(&header)?;
        for s in 0..self.seconds() {
            let mut row = vec![s.to_string(), format!("{:.17}", self.rate_at(s as f64))];
            row.extend(self.mix.iter().map(|m| format!("{m:.17}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<trace csv>", e))
    }

    /// Inverse of [`LoadTrace::write_csv`]; the mix is taken from the first
    /// row.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut points = Vec::new();
        let mut mix = None;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::input("trace CSV needs second, rate and mix columns"));
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::input(format!("bad number {:?}: {e}", &rec[i])))
            };
            points.push((parse(0)?, parse(1)?));
            if mix.is_none() {
                mix = Some((2..rec.len()).map(parse).collect::<Result<Vec<_>>>()?);
            }
        }
        let mix = mix.ok_or_else(|| Error::input("empty trace CSV"))?;
        let duration = points.last().map(|p| p.0 + 1.0).unwrap_or(0.0);
        LoadTrace::new(duration, points, mix)
    }
}

fn validate_mix(mix: &[f64]) -> Result<()> {
    if mix.is_empty() || mix.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::input("mix fractions must lie in [0, 1]"));
    }
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("mix fractions sum to {sum}, not 1")));
    }
    Ok(())
}

/// Flat load at `frac * peak_qps`.
pub fn constant_trace(frac: f64, peak_qps: f64, duration: f64) -> Result<LoadTrace> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::input(format!("load fraction {frac} outside (0, 1]")));
    }
    if !(peak_qps >= 0.0 && peak_qps.is_finite()) {
        return Err(Error::input("peak_qps must be finite and >= 0"));
    }
    LoadTrace::new(duration, vec![(0.0, frac * peak_qps)], DEFAULT_MIX.to_vec())
}

/// Triangle from 10% of peak at t=0 up to peak at mid-run and back down.
pub fn diurnal_trace(peak_qps: f64, duration: f64) -> Result<LoadTrace> {
    if !(peak_qps >= 0.0 && peak_qps.is_finite()) {
        return Err(Error::input("peak_qps must be finite and >= 0"));
    }
    let low = DIURNAL_FLOOR * peak_qps;
    LoadTrace::new(
        duration,
        vec![(0.0, low), (duration / 2.0, peak_qps), (duration, low)],
        DEFAULT_MIX.to_vec(),
    )
}

/// Arrivals for `[second, second + 1)`: a Poisson count with mean
/// `rate_at(second)`, uniform times, types drawn from the mix.
pub fn sample_arrivals<R: Rng + ?Sized>(trace: &LoadTrace, second: usize, rng: &mut R) -> Vec<Arrival> {
    let rate = trace.rate_at(second as f64);
    if rate <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(rate).expect("rate > 0").sample(rng) as usize;
    let start = second as f64;
    let mut out: Vec<Arrival> = (0..count)
        .map(|_| {
            let time = start + rng.random::<f64>();
            let kind = pick_weighted(&trace.mix, rng.random::<f64>());
            Arrival { time, kind }
        })
        .collect();
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    out
}

fn pick_weighted(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in floating-point slack above the last cumulative weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Reproducible arrivals: each second gets its own ChaCha stream, so any
/// second can be regenerated without replaying the ones before it.
#[derive(Debug, Clone)]
pub struct ArrivalStream {
    pub trace: LoadTrace,
    pub seed: u64,
}

impl ArrivalStream {
    pub fn new(trace: LoadTrace, seed: u64) -> Self {
        ArrivalStream { trace, seed }
    }

    pub fn rng_for(&self, second: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(second as u64);
        rng
    }

    pub fn arrivals(&self, second: usize) -> Vec<Arrival> {
        sample_arrivals(&self.trace, second, &mut self.rng_for(second))
    }
}

/// Directed follow graph; an edge `(a, b)` means `a` follows `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowerGraph {
    pub users: usize,
    pub edges: Vec<(u32, u32)>,
    /// Followers per user (in-degree).
    pub followers: Vec<u32>,
    /// Posting propensity, `1 + followers`.
    pub posting_weight: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl FollowerGraph {
    fn from_edges(users: usize, edges: Vec<(u32, u32)>) -> Self {
        let mut followers = vec![0u32; users];
        for &(_, b) in &edges {
            followers[b as usize] += 1;
        }
        let posting_weight: Vec<f64> = followers.iter().map(|&f| 1.0 + f64::from(f)).collect();
        let mut acc = 0.0;
        let cumulative = posting_weight
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        FollowerGraph {
            users,
            edges,
            followers,
            posting_weight,
            cumulative,
        }
    }

    /// Draws a post author with probability proportional to posting weight.
    pub fn sample_author<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("graph has users");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.users - 1)
    }
}

/// Zipf exponent of the latent popularity that shapes in-degrees.
const POPULARITY_EXPONENT: f64 = 0.9;

/// Random follow graph with exactly `edges` distinct edges, no self-follows
/// and a heavy-tailed (Zipf-like) in-degree distribution.
pub fn synth_follower_graph(users: usize, edges: usize, seed: u64) -> Result<FollowerGraph> {
    if users == 0 {
        return Err(Error::input("follower graph needs at least one user"));
    }
    let max_edges = users * (users - 1);
    if edges > max_edges {
        return Err(Error::input(format!(
            "{edges} edges do not fit in a {users}-user graph (max {max_edges})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..users).collect();
    order.shuffle(&mut rng);
    let mut popularity = vec![0.0; users];
    for (rank, &u) in order.iter().enumerate() {
        popularity[u] = (rank as f64 + 1.0).powf(-POPULARITY_EXPONENT);
    }

    let edge_list = if edges * 2 <= max_edges {
        // Sparse: rejection sampling of (uniform follower, popular followee).
        let mut cumulative = Vec::with_capacity(users);
        let mut acc = 0.0;
        for &p in &popularity {
            acc += p;
            cumulative.push(acc);
        }
        let total = acc;
        let mut seen = HashSet::with_capacity(edges);
        let mut list = Vec::with_capacity(edges);
        while list.len() < edges {
            let a = rng.random_range(0..users);
            let u = rng.random::<f64>() * total;
            let b = cumulative.partition_point(|&c| c <= u).min(users - 1);
            if a != b && seen.insert((a, b)) {
                list.push((a as u32, b as u32));
            }
        }
        list
    } else {
        // Dense: weighted sampling without replacement over all pairs
        // (Efraimidis-Spirakis keys).
        let mut keyed: Vec<(f64, u32, u32)> = Vec::with_capacity(max_edges);
        for a in 0..users {
            for (b, &pop) in popularity.iter().enumerate() {
                if a != b {
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    keyed.push((u.ln() / pop, a as u32, b as u32));
                }
            }
        }
        if edges < keyed.len() {
            keyed.select_nth_unstable_by(edges, |x, y| y.0.total_cmp(&x.0));
        }
        keyed.truncate(edges);
        let mut list: Vec<(u32, u32)> = keyed.into_iter().map(|(_, a, b)| (a, b)).collect();
        list.sort_unstable();
        list
    };
    Ok(FollowerGraph::from_edges(users, edge_list))
}
