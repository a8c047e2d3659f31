use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tierscale::datacollect::CollectorConfig;
use tierscale::graphsim::{GraphSpec, StallFault};
use tierscale::mlcore::HybridHyper;
use tierscale::scheduler::SchedulerConfig;
use tierscale::workload::{constant_trace, diurnal_trace, LoadTrace, DEFAULT_MIX};
use tierscale::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Constant,
    Diurnal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(rename = "type")]
    pub kind: WorkloadKind,
    /// Requests/s treated as 100%; `None` uses the graph's calibrated
    /// maximum.
    pub peak_qps: Option<f64>,
    /// Seconds.
    pub duration: f64,
    /// Load level of a constant workload, as a fraction of the peak.
    pub fraction: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            kind: WorkloadKind::Diurnal,
            peak_qps: None,
            duration: 600.0,
            fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    pub episodes: usize,
    pub collector: CollectorConfig,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection {
            episodes: 40,
            collector: CollectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Training share of the split.
    pub split: f64,
    pub split_seed: u64,
    pub hyper: HybridHyper,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            split: 0.9,
            split_seed: 7,
            hyper: HybridHyper::default(),
        }
    }
}

/// One experiment, as read from a JSON file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Graph spec JSON; `None` is the built-in twelve-tier social network.
    pub graph: Option<PathBuf>,
    pub workload: WorkloadConfig,
    pub policy: Option<String>,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub fault: Option<StallFault>,
    pub scheduler: SchedulerConfig,
    pub collect: CollectSection,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            graph: None,
            workload: WorkloadConfig::default(),
            policy: None,
            model: None,
            dataset: None,
            seeds: vec![0],
            out: None,
            fault: None,
            scheduler: SchedulerConfig::default(),
            collect: CollectSection::default(),
            train: TrainSection::default(),
        }
    }
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} {} does not exist", path.display())))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.graph, &mut cfg.model, &mut cfg.dataset, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks that referenced inputs exist and numeric fields are sane.
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.graph {
            must_exist(g, "graph spec")?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let w = &self.workload;
        if !(w.duration >= 1.0 && w.duration.is_finite()) {
            return Err(Error::config("workload duration must be at least one second"));
        }
        if w.peak_qps.is_some_and(|q| !(q > 0.0 && q.is_finite())) {
            return Err(Error::config("workload peak_qps must be positive"));
        }
        if w.kind == WorkloadKind::Constant && !(w.fraction > 0.0 && w.fraction.is_finite()) {
            return Err(Error::config("constant workload fraction must be positive"));
        }
        if !(self.train.split > 0.0 && self.train.split < 1.0) {
            return Err(Error::config("train.split must lie in (0, 1)"));
        }
        self.scheduler.validate()?;
        self.collect.collector.validate()
    }

    pub fn graph_spec(&self) -> Result<GraphSpec> {
        let spec = match &self.graph {
            Some(p) => GraphSpec::from_json_file(p)?,
            None => GraphSpec::social_network(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn peak_qps(&self, spec: &GraphSpec) -> Result<f64> {
        match self.workload.peak_qps {
            Some(q) => Ok(q),
            None => {
                let topo = spec.validate()?;
                let mix = if spec.request_types.len() == DEFAULT_MIX.len() {
                    DEFAULT_MIX.to_vec()
                } else {
                    vec![1.0 / spec.request_types.len() as f64; spec.request_types.len()]
                };
                Ok(spec.max_qps(&topo, &mix))
            }
        }
    }

    pub fn trace(&self, spec: &GraphSpec) -> Result<LoadTrace> {
        let peak = self.peak_qps(spec)?;
        let w = &self.workload;
        let trace = match w.kind {
            WorkloadKind::Diurnal => diurnal_trace(peak, w.duration)?,
            WorkloadKind::Constant => constant_trace(w.fraction, peak, w.duration)?,
        };
        if spec.request_types.len() == trace.mix.len() {
            Ok(trace)
        } else {
            let n = spec.request_types.len();
            trace.with_mix(vec![1.0 / n as f64; n])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"polcy": "sinan"}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_the_remaining_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"collect": {"episodes": 3, "collector": {"episode_len": 50}},
                "train": {"hyper": {"cnn": {"epochs": 2}}},
                "scheduler": {"qos_ms": 400}}"#,
        )
        .unwrap();
        assert_eq!(cfg.collect.episodes, 3);
        assert_eq!(cfg.collect.collector.episode_len, 50);
        assert_eq!(cfg.collect.collector.history, CollectorConfig::default().history);
        assert_eq!(cfg.train.hyper.cnn.epochs, 2);
        assert_eq!(cfg.train.hyper.bt, HybridHyper::default().bt);
        assert_eq!(cfg.scheduler.qos_ms, 400.0);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"collect": {"collector": {"episodes": 3}}}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        std::fs::write(&path, r#"{"model": "m.json", "out": "runs"}"#).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.model.unwrap(), dir.path().join("m.json"));
        assert_eq!(cfg.out.unwrap(), dir.path().join("runs"));
    }

    #[test]
    fn missing_graph_is_a_config_error_naming_the_path() {
        let cfg = ExperimentConfig {
            graph: Some("/no/such/graph.json".into()),
            ..ExperimentConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("/no/such/graph.json")));
    }

    #[test]
    fn constant_workload_uses_the_fraction() {
        let cfg = ExperimentConfig {
            workload: WorkloadConfig {
                kind: WorkloadKind::Constant,
                peak_qps: Some(1000.0),
                duration: 10.0,
                fraction: 0.3,
            },
            ..ExperimentConfig::default()
        };
        let spec = cfg.graph_spec().unwrap();
        let t = cfg.trace(&spec).unwrap();
        assert!((t.rate_at(5.0) - 300.0).abs() < 1e-9);
    }
}
