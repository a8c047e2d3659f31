//! Experiment harness: `collect`, `train`, `run`, `compare` and `explain`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric
//! failure.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tierscale::datacollect::{plan_episodes, run_collection};
use tierscale::experiment::{compare, run_closed_loop, PolicyKind, RunConfig, Summary};
use tierscale::interpret::{channel_scales, explain_model, LimeConfig};
use tierscale::mlcore::{
    evaluate_rmse, split_dataset, train_hybrid, ClassifierMetrics, Dataset, HybridModel, LinearBaseline,
};
use tierscale::scheduler::DecisionLogWriter;
use tierscale::Error;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "tierscale",
    version,
    about = "Simulated multi-tier resource management experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Explore allocations on the simulator and write a labelled dataset.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Split a dataset 9:1, train the hybrid model and report metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run one policy in closed loop and write its decision log and summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Tabulate run summaries per policy against a reference policy.
    Compare {
        /// Summary JSON files written by `run`.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Reference policy for the ratios (default: as_cons when present,
        /// else the first summary's policy).
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank tiers and channels by their influence on one predicted p99.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Episode of the snapshot in the dataset.
        #[arg(long, default_value_t = 0)]
        episode: u32,
        /// Interval of the snapshot in the dataset.
        #[arg(long)]
        interval: u32,
        /// Perturbations for the surrogate fit.
        #[arg(long, default_value_t = LimeConfig::default().samples)]
        samples: usize,
        /// Perturbation noise in units of each channel's spread.
        #[arg(long, default_value_t = LimeConfig::default().sigma)]
        sigma: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.ends_with(&cause) {
                    msg = if msg.is_empty() {
                        cause
                    } else {
                        format!("{msg}: {cause}")
                    };
                }
            }
            eprintln!("error: {msg}");
            let numeric = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numeric));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Collect { common } => cmd_collect(&common),
        Command::Train { common, dataset } => cmd_train(&common, dataset),
        Command::Run { common, policy, model } => cmd_run(&common, policy, model),
        Command::Compare {
            summaries,
            reference,
            out,
        } => cmd_compare(&summaries, reference, out),
        Command::Explain {
            common,
            model,
            dataset,
            episode,
            interval,
            samples,
            sigma,
        } => cmd_explain(&common, model, dataset, episode, interval, samples, sigma),
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn required(path: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let p = path.ok_or_else(|| Error::config(format!("no {what} given (flag or config)")))?;
    if !p.exists() {
        return Err(Error::config(format!("{what} {} does not exist", p.display())).into());
    }
    Ok(p)
}

#[derive(Serialize)]
struct CollectReport {
    samples: usize,
    positives: usize,
    episodes: usize,
    above_region_fraction: f64,
    sha256: String,
}

fn cmd_collect(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let spec = cfg.graph_spec()?;
    let dir = out_dir(&cfg)?;
    let peak = cfg.peak_qps(&spec)?;
    let c = &cfg.collect;
    let plans = plan_episodes(
        peak,
        c.episodes,
        c.collector.episode_len,
        cfg.seeds[0],
        cfg.fault.clone(),
    )?;
    let collection = run_collection(&spec, &plans, &c.collector)?;
    let bytes = collection.dataset.to_bytes()?;
    let path = dir.join("dataset.bin");
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = spec.tiers.iter().map(|t| t.name.clone()).collect();
    let audit = dir.join("audit.csv");
    collection.write_audit_csv(create(&audit)?, &names)?;
    let report = CollectReport {
        samples: collection.dataset.len(),
        positives: collection.dataset.labels().iter().filter(|&&l| l == 1).count(),
        episodes: c.episodes,
        above_region_fraction: collection.above_region_fraction(c.collector.qos_ms, c.collector.alpha_ms),
        sha256: sha256_hex(&bytes),
    };
    write_json(&dir.join("collect.json"), &report)?;
    println!(
        "{} samples ({} violations) -> {}  sha256 {}",
        report.samples,
        report.positives,
        path.display(),
        report.sha256
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainMetrics {
    train_samples: usize,
    test_samples: usize,
    split: f64,
    cnn_test_rmse: f64,
    cnn_train_rmse: f64,
    linear_test_rmse: f64,
    rmse_ratio: f64,
    classifier_test: ClassifierMetrics,
    classifier_train: ClassifierMetrics,
    cnn_initial_loss: f64,
    cnn_final_loss: f64,
    epochs: usize,
}

fn cmd_train(common: &Common, dataset: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.hyper.cnn.seed = s;
        cfg.train.hyper.bt.seed = s;
    }
    let path = required(dataset.or(cfg.dataset.clone()), "dataset")?;
    let ds = Dataset::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let dir = out_dir(&cfg)?;
    let split = split_dataset(&ds, cfg.train.split, cfg.train.split_seed)?;
    let (train, test) = (&split.train.samples, &split.test.samples);
    let trained = train_hybrid(train, ds.shape(), &cfg.train.hyper)?;
    let linear = LinearBaseline::train(train, ds.shape())?;
    let cnn = &trained.model.cnn;
    let metrics = TrainMetrics {
        train_samples: train.len(),
        test_samples: test.len(),
        split: cfg.train.split,
        cnn_test_rmse: evaluate_rmse(cnn, test),
        cnn_train_rmse: evaluate_rmse(cnn, train),
        linear_test_rmse: linear.rmse(test),
        rmse_ratio: evaluate_rmse(cnn, test) / linear.rmse(test),
        classifier_test: ClassifierMetrics::evaluate(&trained.model, test)?,
        classifier_train: ClassifierMetrics::evaluate(&trained.model, train)?,
        cnn_initial_loss: trained.cnn_report.initial_loss,
        cnn_final_loss: trained.cnn_report.final_loss,
        epochs: cfg.train.hyper.cnn.epochs,
    };
    trained.model.save(dir.join("model.json"))?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    let m = &metrics.classifier_test;
    println!(
        "train {} / test {}  cnn rmse {:.2}  linear rmse {:.2}  ratio {:.3}  classifier acc {:.3} fp {:.3} fn {:.3}",
        metrics.train_samples,
        metrics.test_samples,
        metrics.cnn_test_rmse,
        metrics.linear_test_rmse,
        metrics.rmse_ratio,
        m.accuracy,
        m.fp_rate,
        m.fn_rate
    );
    Ok(())
}

fn cmd_run(common: &Common, policy: Option<String>, model: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let name = policy
        .or(cfg.policy.clone())
        .ok_or_else(|| Error::config("no policy given (flag or config)"))?;
    let kind = PolicyKind::parse(&name)?;
    let model = match kind {
        PolicyKind::Sinan => {
            let p = required(model.or(cfg.model.clone()), "model")?;
            Some(HybridModel::load(&p, None).with_context(|| format!("loading {}", p.display()))?)
        }
        _ => None,
    };
    let spec = cfg.graph_spec()?;
    let trace = cfg.trace(&spec)?;
    let dir = out_dir(&cfg)?;
    let names: Vec<String> = spec.tiers.iter().map(|t| t.name.clone()).collect();
    for &seed in &cfg.seeds {
        let run_cfg = RunConfig {
            scheduler: cfg.scheduler.clone(),
            seed,
            fault: cfg.fault.clone(),
            ..RunConfig::default()
        };
        let result = run_closed_loop(&spec, &trace, kind, model.as_ref(), &run_cfg, &[])?;
        let stem = format!("{}_{seed}", kind.name());
        let mut log = DecisionLogWriter::new(create(&dir.join(format!("decisions_{stem}.csv")))?, &names)?;
        for r in &result.log {
            log.write(r)?;
        }
        log.finish()?;
        write_json(&dir.join(format!("summary_{stem}.json")), &result.summary)?;
        let s = &result.summary;
        println!(
            "{} seed {seed}: violations {}/{} ({:.4}), max p99 {:.0} ms, mean cores {:.1}, core-seconds {:.0}",
            s.policy,
            s.violation_intervals,
            s.intervals,
            s.violation_rate,
            s.max_p99_ms,
            s.mean_active_cores,
            s.core_seconds
        );
    }
    Ok(())
}

/// Mean of the per-seed summaries of one policy.
fn average(group: &[Summary]) -> Summary {
    let n = group.len() as f64;
    let mean = |f: fn(&Summary) -> f64| group.iter().map(f).sum::<f64>() / n;
    Summary {
        violation_rate: mean(|s| s.violation_rate),
        core_seconds: mean(|s| s.core_seconds),
        freq_seconds: mean(|s| s.freq_seconds),
        mean_active_cores: mean(|s| s.mean_active_cores),
        mean_rel_freq: mean(|s| s.mean_rel_freq),
        max_p99_ms: group.iter().map(|s| s.max_p99_ms).fold(0.0, f64::max),
        ..group[0].clone()
    }
}

fn cmd_compare(paths: &[PathBuf], reference: Option<String>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut groups: BTreeMap<String, Vec<Summary>> = BTreeMap::new();
    let mut order = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let s: Summary = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("{}: not a run summary: {e}", p.display())))?;
        if !groups.contains_key(&s.policy) {
            order.push(s.policy.clone());
        }
        groups.entry(s.policy.clone()).or_default().push(s);
    }
    let averaged: Vec<Summary> = order.iter().map(|p| average(&groups[p])).collect();
    let reference = reference.unwrap_or_else(|| {
        if groups.contains_key("as_cons") {
            "as_cons".into()
        } else {
            order[0].clone()
        }
    });
    let idx = order
        .iter()
        .position(|p| *p == reference)
        .ok_or_else(|| Error::input(format!("reference policy {reference:?} has no summary")))?;
    let rows = compare(&averaged, idx)?;

    let mut table = Vec::new();
    writeln!(
        table,
        "{:<10} {:>5} {:>10} {:>13} {:>13} {:>11} {:>11}",
        "policy", "runs", "viol_rate", "core_seconds", "freq_seconds", "core_ratio", "freq_ratio"
    )?;
    for r in &rows {
        writeln!(
            table,
            "{:<10} {:>5} {:>10.4} {:>13.1} {:>13.1} {:>11.4} {:>11.4}",
            r.policy,
            groups[&r.policy].len(),
            r.violation_rate,
            r.core_seconds,
            r.freq_seconds,
            r.core_ratio,
            r.freq_ratio
        )?;
    }
    io::stdout().write_all(&table)?;
    if let Some(dir) = out {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("comparison.csv");
        let mut w = create(&path)?;
        writeln!(
            w,
            "policy,runs,violation_rate,core_seconds,freq_seconds,core_ratio,freq_ratio"
        )?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.policy,
                groups[&r.policy].len(),
                r.violation_rate,
                r.core_seconds,
                r.freq_seconds,
                r.core_ratio,
                r.freq_ratio
            )?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_explain(
    common: &Common,
    model: Option<PathBuf>,
    dataset: Option<PathBuf>,
    episode: u32,
    interval: u32,
    samples: usize,
    sigma: f64,
) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let model_path = required(model.or(cfg.model.clone()), "model")?;
    let data_path = required(dataset.or(cfg.dataset.clone()), "dataset")?;
    let ds = Dataset::load(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let model = HybridModel::load(&model_path, Some(ds.shape()))
        .with_context(|| format!("loading {}", model_path.display()))?;
    let snapshot = ds
        .samples
        .iter()
        .find(|s| s.episode == episode && s.interval == interval)
        .ok_or_else(|| Error::input(format!("no snapshot at episode {episode}, interval {interval}")))?;
    let lime = LimeConfig {
        samples,
        sigma,
        seed: cfg.seeds[0],
        ..LimeConfig::default()
    };
    let scales = channel_scales(&ds.samples, ds.shape());
    let report = explain_model(
        &model,
        &snapshot.input(ds.shape()),
        &lime,
        Some(&scales),
        &ds.header.tier_names,
    )?;
    let dir = out_dir(&cfg)?;
    fs::write(dir.join("explain.json"), report.to_json()? + "\n")
        .map_err(|e| Error::io(dir.join("explain.json"), e))?;
    report.write_table(create(&dir.join("explain.txt"))?, usize::MAX)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    println!("{}", report.top_tier().unwrap_or("none"));
    Ok(())
}
