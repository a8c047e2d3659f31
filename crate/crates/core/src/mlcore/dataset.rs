use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InputShape;
use crate::error::{Error, Result};
use crate::telemetry::{N_PERCENTILES, PERCENTILES};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TSDATA\0\x01";

/// Self-describing dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub n_tiers: usize,
    pub history: usize,
    pub channels: usize,
    /// Violation label horizon, intervals.
    pub horizon: usize,
    pub qos_ms: f64,
    pub alpha_ms: f64,
    pub tier_names: Vec<String>,
}

impl DatasetHeader {
    pub fn shape(&self) -> InputShape {
        InputShape {
            n_tiers: self.n_tiers,
            history: self.history,
            channels: self.channels,
        }
    }
}

/// One training record: the telemetry window before an interval, the
/// allocation applied during it, the tail latency it produced, and whether
/// QoS was violated within the label horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub episode: u32,
    pub interval: u32,
    pub rh: Vec<f64>,
    pub lh: Vec<f64>,
    pub rc: Vec<f64>,
    /// Realized p95..p99, ms.
    pub percentiles: [f64; N_PERCENTILES],
    pub label: u8,
}

impl Sample {
    pub fn p99(&self) -> f64 {
        self.percentiles[N_PERCENTILES - 1]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.rh.len() + self.lh.len() + self.rc.len());
        v.extend_from_slice(&self.rh);
        v.extend_from_slice(&self.lh);
        v.extend_from_slice(&self.rc);
        v
    }

    pub fn input(&self, shape: InputShape) -> super::ModelInput<f64> {
        super::ModelInput {
            shape,
            rh: self.rh.clone(),
            lh: self.lh.clone(),
            rc: self.rc.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Result of a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Set when one side came out empty.
    pub warning: Option<String>,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f64s(buf: &[u8], at: &mut usize, n: usize) -> Vec<f64> {
    let v = buf[*at..*at + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    *at += 8 * n;
    v
}

impl Dataset {
    pub fn new(header: DatasetHeader) -> Self {
        Dataset {
            header,
            samples: Vec::new(),
        }
    }

    pub fn shape(&self) -> InputShape {
        self.header.shape()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn record_len(&self) -> usize {
        let s = self.shape();
        4 + 4 + 1 + 8 * (N_PERCENTILES + s.flat_len())
    }

    pub fn check(&self) -> Result<()> {
        let s = self.shape();
        for (i, r) in self.samples.iter().enumerate() {
            if r.rh.len() != s.rh_len() || r.lh.len() != s.lh_len() || r.rc.len() != s.rc_len() {
                return Err(Error::input(format!("sample {i} disagrees with the header shape")));
            }
            if r.label > 1 {
                return Err(Error::input(format!("sample {i} has non-binary label {}", r.label)));
            }
        }
        Ok(())
    }

    /// Magic, header length (u32 LE), JSON header, record count (u64 LE),
    /// then fixed-width little-endian records.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(24 + header.len() + self.len() * self.record_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.episode.to_le_bytes());
            out.extend_from_slice(&s.interval.to_le_bytes());
            out.push(s.label);
            put_f64s(&mut out, &s.percentiles);
            put_f64s(&mut out, &s.rh);
            put_f64s(&mut out, &s.lh);
            put_f64s(&mut out, &s.rc);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::input(format!("malformed dataset: {m}"));
        if buf.len() < 12 || &buf[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        let mut at = 12 + hlen;
        if buf.len() < at + 8 {
            return Err(bad("truncated header"));
        }
        let header: DatasetHeader = serde_json::from_slice(&buf[12..at])?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "dataset schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let count = u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes")) as usize;
        at += 8;
        let mut ds = Dataset::new(header);
        let rec = ds.record_len();
        if buf.len() != at + count * rec {
            return Err(bad("record section has the wrong length"));
        }
        let s = ds.shape();
        ds.samples.reserve(count);
        for _ in 0..count {
            let episode = u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"));
            let interval = u32::from_le_bytes(buf[at + 4..at + 8].try_into().expect("4 bytes"));
            let label = buf[at + 8];
            at += 9;
            let pct = get_f64s(buf, &mut at, N_PERCENTILES);
            let rh = get_f64s(buf, &mut at, s.rh_len());
            let lh = get_f64s(buf, &mut at, s.lh_len());
            let rc = get_f64s(buf, &mut at, s.rc_len());
            ds.samples.push(Sample {
                episode,
                interval,
                rh,
                lh,
                rc,
                percentiles: pct.try_into().expect("five percentiles"),
                label,
            });
        }
        ds.check()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// One row per sample: ids, label, percentiles, then every input entry.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let s = self.shape();
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["episode".to_string(), "interval".into(), "label".into()];
        head.extend(PERCENTILES.iter().map(|p| format!("p{p}")));
        head.extend((0..s.rh_len()).map(|i| format!("rh{i}")));
        head.extend((0..s.lh_len()).map(|i| format!("lh{i}")));
        head.extend((0..s.rc_len()).map(|i| format!("rc{i}")));
        w.write_record(&head)?;
        for r in &self.samples {
            let mut row = vec![r.episode.to_string(), r.interval.to_string(), r.label.to_string()];
            row.extend(r.percentiles.iter().map(f64::to_string));
            row.extend(r.flatten().iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Shuffled disjoint split: `⌊n·ratio⌋` training samples, the rest test.
pub fn split_dataset(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Split> {
    if dataset.is_empty() {
        return Err(Error::input("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::input(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_train = (n as f64 * ratio).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ids: &[usize]| Dataset {
        header: dataset.header.clone(),
        samples: ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    let train = pick(&idx[..n_train]);
    let test = pick(&idx[n_train..]);
    let warning = (train.is_empty() || test.is_empty())
        .then(|| format!("degenerate split of {n} samples: {}/{}", train.len(), test.len()));
    Ok(Split { train, test, warning })
}
